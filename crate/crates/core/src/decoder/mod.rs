//! Action-token decoder, training losses, and greedy decoding.

mod net;
mod vocab;

pub use net::{argmax, forward, greedy, init, DecoderConfig, Incremental, PREFIX};
pub use vocab::{decode_tokens, encode_plan, token_text, BOS, CLOSE, EOS, OPEN, SEP, VOCAB_SIZE};
pub use crate::train::{train_stage1, train_stage2, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::planeval::ActionSequence;
use crate::tensor_core::{Graph, ParameterStore, Tensor};

/// Probability clamp shared by the classifier loss and its graph op.
pub const BCE_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![probs.len(), 1], probs.to_vec())?);
    let l = g.bce(p, labels, BCE_CLAMP)?;
    Ok(g.value(l).item())
}

/// Mean token NLL of `targets` under row-wise softmax of `logits` (`T × V`).
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets)?;
    Ok(g.value(loss).item())
}

/// Greedy plan for an assembled input sequence (`N × D`).
pub fn decode(store: &ParameterStore, cfg: &DecoderConfig, input: &Tensor, max_len: usize) -> Result<ActionSequence> {
    if max_len == 0 {
        return Err(Error::contract("decode needs max_len >= 1"));
    }
    Ok(decode_tokens(&greedy(store, cfg, input, max_len)?))
}

/// Teacher-forcing pair for a plan: decoder inputs (BOS-shifted) and targets.
pub fn teacher_pair(plan: &ActionSequence, max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let targets = encode_plan(plan)?;
    if targets.len() > max_len {
        return Err(Error::Data(format!(
            "plan of {} tokens exceeds decoder max_len {max_len}",
            targets.len()
        )));
    }
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    Ok((inputs, targets))
}
