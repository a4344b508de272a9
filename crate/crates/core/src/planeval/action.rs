use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Find,
    Open,
    Close,
    Pick,
    Place,
    Clean,
    Discard,
    ToggleOn,
    ToggleOff,
}

impl Predicate {
    pub const ALL: [Predicate; 9] = [
        Predicate::Find,
        Predicate::Open,
        Predicate::Close,
        Predicate::Pick,
        Predicate::Place,
        Predicate::Clean,
        Predicate::Discard,
        Predicate::ToggleOn,
        Predicate::ToggleOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Find => "find",
            Predicate::Open => "open",
            Predicate::Close => "close",
            Predicate::Pick => "pick",
            Predicate::Place => "place",
            Predicate::Clean => "clean",
            Predicate::Discard => "discard",
            Predicate::ToggleOn => "toggle_on",
            Predicate::ToggleOff => "toggle_off",
        }
    }
}

impl FromStr for Predicate {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Predicate::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or(())
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `predicate(object)` step. The object is stored canonicalized
/// (trimmed, lowercase), so equality is exact string equality.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub predicate: Predicate,
    pub object: String,
}

impl Action {
    pub fn new(predicate: Predicate, object: impl AsRef<str>) -> Self {
        Action {
            predicate,
            object: object.as_ref().trim().to_ascii_lowercase(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.predicate, self.object)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSequence(pub Vec<Action>);

impl ActionSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Action> {
        self.0.iter()
    }

    /// Canonical text form: one step per line.
    pub fn format(&self) -> String {
        self.0.iter().map(|a| format!("{a}\n")).collect()
    }
}

impl From<Vec<Action>> for ActionSequence {
    fn from(v: Vec<Action>) -> Self {
        ActionSequence(v)
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Parses `step (sep step)*` where `step := predicate '(' object ')'` and
/// `sep` is a newline or `;`. Blank steps are skipped.
pub fn parse_plan(text: &str) -> Result<ActionSequence> {
    let mut actions = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let mut col = 0;
        for fragment in line.split(';') {
            let start_col = col + 1;
            col += fragment.chars().count() + 1;
            if fragment.trim().is_empty() {
                continue;
            }
            let leading = fragment.len() - fragment.trim_start().len();
            actions.push(parse_step(fragment.trim(), line_no, start_col + leading)?);
        }
    }
    Ok(ActionSequence(actions))
}

fn parse_step(step: &str, line: usize, column: usize) -> Result<Action> {
    let err = |offset: usize, message: String| Error::Parse {
        line,
        column: column + offset,
        message,
    };
    let open = step
        .find('(')
        .ok_or_else(|| err(0, format!("expected `predicate(object)`, found `{step}`")))?;
    let name = step[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(err(0, format!("malformed predicate `{name}`")));
    }
    let close = step[open..]
        .find(')')
        .map(|i| i + open)
        .ok_or_else(|| err(open, "missing `)`".into()))?;
    if !step[close + 1..].trim().is_empty() {
        return Err(err(close + 1, format!("unexpected `{}` after step", &step[close + 1..])));
    }
    let object = step[open + 1..close].trim();
    if object.is_empty() || object.contains('(') {
        return Err(err(open + 1, "empty or malformed object".into()));
    }
    let predicate = name.parse::<Predicate>().map_err(|_| Error::Vocabulary {
        name: name.to_string(),
        line,
    })?;
    Ok(Action::new(predicate, object))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_steps() {
        let plan = parse_plan("open(microwave)\npick(cookie)").unwrap();
        assert_eq!(
            plan.0,
            vec![
                Action::new(Predicate::Open, "microwave"),
                Action::new(Predicate::Pick, "cookie")
            ]
        );
    }

    #[test]
    fn semicolons_and_whitespace() {
        let plan = parse_plan("  find( sink ) ;place(rag)\n\n toggle_on(MICROWAVE) ").unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.0[2].object, "microwave");
    }

    #[test]
    fn unknown_predicate_names_it() {
        match parse_plan("fly(microwave)") {
            Err(Error::Vocabulary { name, line }) => {
                assert_eq!(name, "fly");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_step_reports_position() {
        match parse_plan("find(sink)\nopen microwave") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_plan("open(cabinet) x").is_err());
        assert!(parse_plan("open()").is_err());
        assert!(parse_plan("open(cabinet").is_err());
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        (0..Predicate::ALL.len(), "[a-z][a-z_]{0,8}")
            .prop_map(|(p, o)| Action::new(Predicate::ALL[p], o))
    }

    proptest! {
        #[test]
        fn format_parse_is_stable(actions in prop::collection::vec(arb_action(), 0..12), semis in any::<bool>()) {
            let plan = ActionSequence(actions);
            let text = if semis { plan.to_string() } else { plan.format() };
            let once = parse_plan(&text).unwrap();
            prop_assert_eq!(&once, &plan);
            let twice = parse_plan(&once.format()).unwrap();
            prop_assert_eq!(once.format(), twice.format());
        }
    }
}
