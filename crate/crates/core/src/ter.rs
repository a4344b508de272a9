//! Task-environment reranker: one multi-head self-attention layer over all
//! image tokens whose keys are restricted to task-relevant patches.

use crate::error::{Error, Result};
use crate::maskgrid::PatchWeights;
use crate::tensor_core::{init_weight, Graph, ParameterStore, Rng, Tensor, Var};

/// Additive logit for masked keys; `exp` of it underflows to exactly zero.
pub const MASK_BIAS: f64 = -1e9;

pub const WQ: &str = "ter.wq";
pub const WK: &str = "ter.wk";
pub const WV: &str = "ter.wv";
pub const WO: &str = "ter.wo";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerConfig {
    pub heads: usize,
    /// Restrict attention to tokens of the same image.
    pub per_image: bool,
}

const QK_GAIN: f64 = 2.0;

/// Near-identity start: `W_Q = W_K = g·I + noise` makes attention peak on
/// similar patches (each query first of all on itself) and `W_V = W_O = I +
/// noise` passes the attended features through, so local detail survives
/// the layer before training sharpens it.
pub fn init(store: &mut ParameterStore, rng: &mut Rng, c: usize) -> Result<()> {
    for (name, g) in [(WQ, QK_GAIN), (WK, QK_GAIN), (WV, 1.0), (WO, 1.0)] {
        let mut w = init_weight(rng, c, c, 0.1);
        for i in 0..c {
            w.data_mut()[i * c + i] += g;
        }
        store.insert(name, w)?;
    }
    Ok(())
}

/// Key-axis bias: `0` for live keys, [`MASK_BIAS`] otherwise. An all-zero
/// mask (per attention group) is treated as all ones.
pub fn attention_bias(w: &PatchWeights, per_image: bool) -> Tensor {
    let n = w.tokens();
    let per = w.side() * w.side();
    let group = if per_image { per } else { n };
    let mut keys = w.as_f64();
    for (g, chunk) in keys.chunks_mut(group).enumerate() {
        if chunk.iter().all(|&v| v == 0.0) {
            log::warn!("reranker mask group {g} is empty; attending to all of its tokens");
            chunk.fill(1.0);
        }
    }
    let mut data = vec![MASK_BIAS; n * n];
    for i in 0..n {
        for j in 0..n {
            if keys[j] != 0.0 && (!per_image || i / per == j / per) {
                data[i * n + j] = 0.0;
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Reranked tokens plus each head's attention matrix.
pub fn forward(
    g: &mut Graph,
    store: &ParameterStore,
    v: Var,
    bias: &Tensor,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let c = g.value(v).cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!("{heads} heads do not divide width {c}")));
    }
    let n = g.value(v).rows();
    if bias.shape() != [n, n] {
        return Err(Error::dim("reranker mask", &[n, n], bias.shape()));
    }
    let d = c / heads;
    let (wq, wk, wv, wo) = (g.param(store, WQ)?, g.param(store, WK)?, g.param(store, WV)?, g.param(store, WO)?);
    let q = g.matmul(v, wq)?;
    let k = g.matmul(v, wk)?;
    let val = g.matmul(v, wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(val, h * d, d)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let logits = g.add_const(logits, bias)?;
        let a = g.softmax(logits);
        attns.push(a);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    Ok((g.matmul(cat, wo)?, attns))
}

/// `softmax(QKᵀ/√d + log W) V`, heads concatenated and output-projected.
pub fn masked_self_attention(
    g: &mut Graph,
    store: &ParameterStore,
    v: Var,
    w: &PatchWeights,
    cfg: TerConfig,
) -> Result<Var> {
    let bias = attention_bias(w, cfg.per_image);
    Ok(forward(g, store, v, &bias, cfg.heads)?.0)
}

/// Per-head attention matrices for inspection.
pub fn attention_weights(
    store: &ParameterStore,
    v: &Tensor,
    w: &PatchWeights,
    cfg: TerConfig,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let bias = attention_bias(w, cfg.per_image);
    let (_, attns) = forward(&mut g, store, vv, &bias, cfg.heads)?;
    Ok(attns.into_iter().map(|a| g.value(a).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::softmax_lastdim;

    fn setup(c: usize, n: usize, seed: u64) -> (ParameterStore, Tensor) {
        let mut rng = Rng::new(seed);
        let mut store = ParameterStore::new();
        init(&mut store, &mut rng, c).unwrap();
        (store, rng.normal_tensor(&[n, c], 1.0))
    }

    fn run(store: &ParameterStore, v: &Tensor, w: &PatchWeights, heads: usize) -> Tensor {
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let out = masked_self_attention(&mut g, store, vv, w, TerConfig { heads, per_image: false }).unwrap();
        g.value(out).clone()
    }

    /// Plain multi-head attention where the keys are the rows in `keys`.
    fn restricted(store: &ParameterStore, v: &Tensor, keys: &[usize], heads: usize) -> Tensor {
        let p = |n: &str| store.value(n).unwrap().clone();
        let q = v.matmul(&p(WQ)).unwrap();
        let sub = Tensor::from_rows(&keys.iter().map(|&j| v.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
        let k = sub.matmul(&p(WK)).unwrap();
        let val = sub.matmul(&p(WV)).unwrap();
        let (n, c) = (v.rows(), v.cols());
        let d = c / heads;
        let mut cat = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..keys.len())
                    .map(|j| (0..d).map(|t| q.get(i, h * d + t) * k.get(j, h * d + t)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let a = softmax_lastdim(&Tensor::matrix(1, keys.len(), logits).unwrap());
                for t in 0..d {
                    cat[i * c + h * d + t] = (0..keys.len()).map(|j| a.data()[j] * val.get(j, h * d + t)).sum();
                }
            }
        }
        Tensor::matrix(n, c, cat).unwrap().matmul(&p(WO)).unwrap()
    }

    #[test]
    fn masking_equals_restriction() {
        let mut rng = Rng::new(1);
        for trial in 0..30 {
            let (store, v) = setup(16, 16, trial);
            let mut bits: Vec<u8> = (0..16).map(|_| rng.bernoulli(0.4) as u8).collect();
            bits[trial as usize % 16] = 1;
            let w = PatchWeights::from_data(4, 1, bits.clone()).unwrap();
            let live: Vec<usize> = (0..16).filter(|&j| bits[j] == 1).collect();
            let out = run(&store, &v, &w, 8);
            assert!(out.max_abs_diff(&restricted(&store, &v, &live, 8)) < 1e-9);
            for a in attention_weights(&store, &v, &w, TerConfig { heads: 8, per_image: false }).unwrap() {
                for i in 0..16 {
                    let row = a.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let masked: f64 = (0..16).filter(|&j| bits[j] == 0).map(|j| row[j]).sum();
                    assert!(masked < 1e-30);
                }
            }
        }
    }

    #[test]
    fn all_ones_is_unmasked_and_all_zero_falls_back() {
        let (store, v) = setup(16, 16, 4);
        let all: Vec<usize> = (0..16).collect();
        let plain = restricted(&store, &v, &all, 8);
        assert!(run(&store, &v, &PatchWeights::ones(4, 1), 8).max_abs_diff(&plain) < 1e-12);
        assert_eq!(run(&store, &v, &PatchWeights::zeros(4, 1), 8), run(&store, &v, &PatchWeights::ones(4, 1), 8));
    }

    #[test]
    fn single_live_key_copies_its_value() {
        let (store, v) = setup(16, 16, 5);
        let mut bits = vec![0u8; 16];
        bits[0] = 1;
        let out = run(&store, &v, &PatchWeights::from_data(4, 1, bits).unwrap(), 8);
        let token0 = restricted(&store, &v, &[0], 8);
        for i in 0..16 {
            for c in 0..16 {
                assert!((out.get(i, c) - token0.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes_and_per_image_mode() {
        let (store, v) = setup(16, 32, 6);
        let w = PatchWeights::ones(4, 2);
        let cfg = TerConfig { heads: 8, per_image: true };
        let attns = attention_weights(&store, &v, &w, cfg).unwrap();
        assert_eq!(attns.len(), 8);
        assert_eq!(attns[0].shape(), &[32, 32]);
        assert!(attns.iter().all(|a| a.get(0, 20) == 0.0 && a.get(20, 3) == 0.0));
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let out = masked_self_attention(&mut g, &store, vv, &w, cfg).unwrap();
        assert_eq!(g.value(out).shape(), v.shape());
        let bad = PatchWeights::ones(4, 1);
        let vv = g.constant(v);
        assert!(matches!(masked_self_attention(&mut g, &store, vv, &bad, cfg), Err(Error::Dimension { .. })));
    }
}
