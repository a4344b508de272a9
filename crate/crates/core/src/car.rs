//! Counterfactual clause classifier and conditional sub-grid pooling.

use crate::error::{Error, Result};
use crate::maskgrid::PatchWeights;
use crate::tensor_core::{init_weight, Graph, ParameterStore, Rng, Tensor, Var};

pub const PREFIX: &str = "cls.";
pub const W1: &str = "cls.w1";
pub const B1: &str = "cls.b1";
pub const W2: &str = "cls.w2";
pub const B2: &str = "cls.b2";

pub fn init_classifier(store: &mut ParameterStore, rng: &mut Rng, c: usize, hidden: usize) -> Result<()> {
    store.insert(W1, init_weight(rng, 2 * c, hidden, 1.0))?;
    store.insert(B1, Tensor::zeros(&[1, hidden]))?;
    store.insert(W2, init_weight(rng, hidden, 1, 1.0))?;
    store.insert(B2, Tensor::zeros(&[1, 1]))?;
    Ok(())
}

/// Counterfactual probabilities for rows `[s0; sk]` of `pairs` (`n × 2C`),
/// returned as `n × 1`.
pub fn classify_pairs(g: &mut Graph, store: &ParameterStore, pairs: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(store, W1)?, g.param(store, B1)?, g.param(store, W2)?, g.param(store, B2)?);
    if g.value(pairs).cols() != g.value(w1).rows() {
        return Err(Error::dim("clause classifier", &[g.value(w1).rows()], &[g.value(pairs).cols()]));
    }
    let h = g.matmul(pairs, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h);
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    Ok(g.sigmoid(o))
}

/// `p_k = σ(MLP([s0; sk]))` for single clause embeddings (`1 × C` each).
pub fn classify_clause(g: &mut Graph, store: &ParameterStore, s0: Var, sk: Var) -> Result<Var> {
    if g.value(s0).shape() != g.value(sk).shape() {
        return Err(Error::dim("classify_clause", g.value(s0).shape(), g.value(sk).shape()));
    }
    let pair = g.concat_cols(&[s0, sk])?;
    classify_pairs(g, store, pair)
}

/// Clause indices (1-based; `probs[i]` belongs to clause `i + 1`) with
/// probability strictly above `threshold`.
pub fn select_ctrf(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Linear map taking `m·P²` patch tokens to `m·K²` pooled tokens: row `g`
/// averages the live patches of sub-grid `g`, and is zero when none are live.
pub fn pooling_matrix(w_cf: &PatchWeights, k: usize) -> Result<Tensor> {
    let (p, m) = (w_cf.side(), w_cf.images());
    if k == 0 || p % k != 0 {
        return Err(Error::config(format!("patch grid {p} is not divisible by K = {k}")));
    }
    let s = p / k;
    let (rows, cols) = (m * k * k, m * p * p);
    let mut data = vec![0.0; rows * cols];
    for img in 0..m {
        for gr in 0..k {
            for gc in 0..k {
                let row = img * k * k + gr * k + gc;
                let live: Vec<usize> = (gr * s..(gr + 1) * s)
                    .flat_map(|r| (gc * s..(gc + 1) * s).map(move |c| (r, c)))
                    .filter(|&(r, c)| w_cf.get(img, r, c) == 1)
                    .map(|(r, c)| img * p * p + r * p + c)
                    .collect();
                for &col in &live {
                    data[row * cols + col] = 1.0 / live.len() as f64;
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Counterfactual tokens `m·K² × C` from reranked tokens `m·P² × C`.
pub fn conditional_pool(g: &mut Graph, v_rerank: Var, w_cf: &PatchWeights, k: usize) -> Result<Var> {
    let pool = pooling_matrix(w_cf, k)?;
    g.const_matmul(&pool, v_rerank)
}

pub fn conditional_pool_tensor(v_rerank: &Tensor, w_cf: &PatchWeights, k: usize) -> Result<Tensor> {
    pooling_matrix(w_cf, k)?.matmul(v_rerank)
}
