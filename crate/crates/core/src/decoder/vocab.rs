use crate::error::{Error, Result};
use crate::planeval::{Action, ActionSequence, Predicate};
use crate::worldgen::ObjectClass;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const OPEN: usize = 2;
pub const CLOSE: usize = 3;
pub const SEP: usize = 4;
const PRED0: usize = 5;
const CLASS0: usize = PRED0 + Predicate::ALL.len();
pub const VOCAB_SIZE: usize = CLASS0 + ObjectClass::ALL.len();

/// Display form of token `id`.
pub fn token_text(id: usize) -> String {
    match id {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        OPEN => "(".into(),
        CLOSE => ")".into(),
        SEP => ";".into(),
        i if i < CLASS0 => Predicate::ALL[i - PRED0].name().into(),
        i if i < VOCAB_SIZE => ObjectClass::ALL[i - CLASS0].name().into(),
        _ => "<invalid>".into(),
    }
}

/// `pred ( obj )` per step, followed by EOS. Objects must be class names.
pub fn encode_plan(plan: &ActionSequence) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(4 * plan.len() + 1);
    for a in plan.iter() {
        let p = Predicate::ALL.iter().position(|&p| p == a.predicate).unwrap();
        let c = ObjectClass::from_name(&a.object).ok_or_else(|| {
            Error::Data(format!("plan object `{}` is not in the action vocabulary", a.object))
        })?;
        out.extend([PRED0 + p, OPEN, CLASS0 + c.index(), CLOSE]);
    }
    out.push(EOS);
    Ok(out)
}

/// Parses generated tokens up to EOS. `;` between steps is accepted; the
/// first malformed step and everything after it are dropped.
pub fn decode_tokens(tokens: &[usize]) -> ActionSequence {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let toks = &tokens[..end];
    let mut actions = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i] == SEP {
            i += 1;
            continue;
        }
        match toks.get(i..i + 4) {
            Some(&[p, OPEN, c, CLOSE]) if (PRED0..CLASS0).contains(&p) && (CLASS0..VOCAB_SIZE).contains(&c) => {
                actions.push(Action::new(Predicate::ALL[p - PRED0], ObjectClass::ALL[c - CLASS0].name()));
                i += 4;
            }
            _ => {
                log::debug!(
                    "dropping malformed plan fragment: {}",
                    toks[i..].iter().map(|&t| token_text(t)).collect::<Vec<_>>().join(" ")
                );
                break;
            }
        }
    }
    ActionSequence(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planeval::parse_plan;

    #[test]
    fn round_trip_and_size() {
        assert_eq!(VOCAB_SIZE, 26);
        let plan = parse_plan("find(microwave); open(microwave); toggle_on(microwave)").unwrap();
        let toks = encode_plan(&plan).unwrap();
        assert_eq!(toks.len(), 13);
        assert_eq!(decode_tokens(&toks), plan);
        assert_eq!(token_text(toks[8]), "toggle_on");
    }

    #[test]
    fn malformed_tail_is_dropped() {
        let plan = parse_plan("find(sink); pick(cup)").unwrap();
        let mut toks = encode_plan(&plan).unwrap();
        toks.pop();
        toks.extend([SEP, PRED0, OPEN]);
        assert_eq!(decode_tokens(&toks), plan);
        assert!(decode_tokens(&[EOS, PRED0]).is_empty());
        assert!(decode_tokens(&[OPEN, CLOSE]).is_empty());
        assert!(encode_plan(&parse_plan("find(sink_0)").unwrap()).is_err());
    }
}
