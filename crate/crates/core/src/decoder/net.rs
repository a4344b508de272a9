//! Pre-LN causal transformer decoder. The assembled input sequence acts as a
//! memory prefix: every block's attention keys and values are
//! `[LN(prefix); LN(h)]`, while queries come from generated positions only.

use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, VOCAB_SIZE};
use crate::encoders::sinusoid;
use crate::error::{Error, Result};
use crate::tensor_core::{init_weight, Graph, ParameterStore, Rng, Tensor, Var};
use crate::ter::MASK_BIAS;

pub const PREFIX: &str = "dec.";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub max_len: usize,
}

fn name(l: usize, part: &str) -> String {
    format!("dec.{l}.{part}")
}

pub fn init(store: &mut ParameterStore, rng: &mut Rng, cfg: &DecoderConfig) -> Result<()> {
    if cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads) {
        return Err(Error::config(format!("{} decoder heads do not divide width {}", cfg.heads, cfg.d)));
    }
    let d = cfg.d;
    store.insert("dec.embed", rng.normal_tensor(&[VOCAB_SIZE, d], 0.5))?;
    store.insert("dec.pos", rng.normal_tensor(&[cfg.max_len, d], 0.1))?;
    let resid_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        for ln in ["ln1", "lnm", "ln2"] {
            store.insert(name(l, &format!("{ln}.g")), Tensor::ones(&[1, d]))?;
            store.insert(name(l, &format!("{ln}.b")), Tensor::zeros(&[1, d]))?;
        }
        for w in ["wq", "wk", "wv"] {
            store.insert(name(l, w), init_weight(rng, d, d, 1.0))?;
        }
        store.insert(name(l, "wo"), init_weight(rng, d, d, resid_gain))?;
        store.insert(name(l, "ff1.w"), init_weight(rng, d, cfg.ff, 1.0))?;
        store.insert(name(l, "ff1.b"), Tensor::zeros(&[1, cfg.ff]))?;
        store.insert(name(l, "ff2.w"), init_weight(rng, cfg.ff, d, resid_gain))?;
        store.insert(name(l, "ff2.b"), Tensor::zeros(&[1, d]))?;
    }
    store.insert("dec.lnf.g", Tensor::ones(&[1, d]))?;
    store.insert("dec.lnf.b", Tensor::zeros(&[1, d]))?;
    store.insert("dec.out.w", init_weight(rng, d, VOCAB_SIZE, 1.0))?;
    store.insert("dec.out.b", Tensor::zeros(&[1, VOCAB_SIZE]))?;
    Ok(())
}

/// Fixed sinusoid code for prefix rows, so the decoder can tell the input
/// segments apart.
pub fn prefix_positions(n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|i| sinusoid(i, d)).collect();
    Tensor::matrix(n, d, data).expect("n·d values")
}

fn ln(g: &mut Graph, store: &ParameterStore, x: Var, base: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{base}.g"))?;
    let beta = g.param(store, &format!("{base}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Teacher-forced logits (`T × V`) for `inputs` (BOS first) given `prefix`
/// (`N × D`).
pub fn forward(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &DecoderConfig,
    prefix: Var,
    inputs: &[usize],
) -> Result<Var> {
    let t = inputs.len();
    if t == 0 || t > cfg.max_len {
        return Err(Error::contract(format!("decoder input length {t} outside 1..={}", cfg.max_len)));
    }
    if g.value(prefix).cols() != cfg.d {
        return Err(Error::dim("decoder prefix", &[cfg.d], &[g.value(prefix).cols()]));
    }
    let np = g.value(prefix).rows();
    let prefix = g.add_const(prefix, &prefix_positions(np, cfg.d))?;
    let dh = cfg.d / cfg.heads;
    let embed = g.param(store, "dec.embed")?;
    let x = g.gather_rows(embed, inputs)?;
    let pos = g.param(store, "dec.pos")?;
    let pos = g.slice_rows(pos, 0, t)?;
    let mut x = g.add(x, pos)?;
    let mut causal = vec![0.0; t * (np + t)];
    for i in 0..t {
        for j in i + 1..t {
            causal[i * (np + t) + np + j] = MASK_BIAS;
        }
    }
    let causal = Tensor::new(vec![t, np + t], causal)?;
    for l in 0..cfg.layers {
        let h = ln(g, store, x, &name(l, "ln1"))?;
        let m = ln(g, store, prefix, &name(l, "lnm"))?;
        let (wq, wk, wv, wo) = (
            g.param(store, &name(l, "wq"))?,
            g.param(store, &name(l, "wk"))?,
            g.param(store, &name(l, "wv"))?,
            g.param(store, &name(l, "wo"))?,
        );
        let q = g.matmul(h, wq)?;
        let kv_in = g.concat_rows(&[m, h])?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let s = g.add_const(s, &causal)?;
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        let att = g.matmul(cat, wo)?;
        x = g.add(x, att)?;
        let h2 = ln(g, store, x, &name(l, "ln2"))?;
        let (f1w, f1b, f2w, f2b) = (
            g.param(store, &name(l, "ff1.w"))?,
            g.param(store, &name(l, "ff1.b"))?,
            g.param(store, &name(l, "ff2.w"))?,
            g.param(store, &name(l, "ff2.b"))?,
        );
        let f = g.matmul(h2, f1w)?;
        let f = g.add_row(f, f1b)?;
        let f = g.gelu(f);
        let f = g.matmul(f, f2w)?;
        let f = g.add_row(f, f2b)?;
        x = g.add(x, f)?;
    }
    let x = ln(g, store, x, "dec.lnf")?;
    let (ow, ob) = (g.param(store, "dec.out.w")?, g.param(store, "dec.out.b")?);
    let logits = g.matmul(x, ow)?;
    g.add_row(logits, ob)
}

struct Block {
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ff1: (Tensor, Vec<f64>),
    ff2: (Tensor, Vec<f64>),
    mem_k: Tensor,
    mem_v: Tensor,
    cache_k: Vec<Vec<f64>>,
    cache_v: Vec<Vec<f64>>,
}

fn layer_norm_row(x: &[f64], (g, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn gelu(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

/// Cached-prefix incremental evaluation of [`forward`] for decoding.
pub struct Incremental {
    cfg: DecoderConfig,
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf: (Vec<f64>, Vec<f64>),
    out: (Tensor, Vec<f64>),
    step: usize,
}

impl Incremental {
    pub fn new(store: &ParameterStore, cfg: &DecoderConfig, prefix: &Tensor) -> Result<Self> {
        if prefix.cols() != cfg.d {
            return Err(Error::dim("decoder prefix", &[cfg.d], &[prefix.cols()]));
        }
        let prefix = prefix.zip_map(&prefix_positions(prefix.rows(), cfg.d), |a, b| a + b)?;
        let p = |n: &str| store.value(n).cloned();
        let row = |n: &str| store.value(n).map(|t| t.data().to_vec());
        let pair = |base: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((row(&format!("{base}.g"))?, row(&format!("{base}.b"))?))
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let lnm = pair(&name(l, "lnm"))?;
            let mem = Tensor::from_rows(
                &(0..prefix.rows()).map(|r| layer_norm_row(prefix.row(r), &lnm)).collect::<Vec<_>>(),
            )?;
            let (wk, wv) = (p(&name(l, "wk"))?, p(&name(l, "wv"))?);
            blocks.push(Block {
                ln1: pair(&name(l, "ln1"))?,
                ln2: pair(&name(l, "ln2"))?,
                wq: p(&name(l, "wq"))?,
                mem_k: mem.matmul(&wk)?,
                mem_v: mem.matmul(&wv)?,
                wk,
                wv,
                wo: p(&name(l, "wo"))?,
                ff1: (p(&name(l, "ff1.w"))?, row(&name(l, "ff1.b"))?),
                ff2: (p(&name(l, "ff2.w"))?, row(&name(l, "ff2.b"))?),
                cache_k: Vec::new(),
                cache_v: Vec::new(),
            });
        }
        Ok(Incremental {
            cfg: *cfg,
            embed: p("dec.embed")?,
            pos: p("dec.pos")?,
            blocks,
            lnf: pair("dec.lnf")?,
            out: (p("dec.out.w")?, row("dec.out.b")?),
            step: 0,
        })
    }

    /// Feeds the token at the next position and returns its logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        if self.step >= self.cfg.max_len || token >= VOCAB_SIZE {
            return Err(Error::contract(format!("decoder step {} / token {token} out of range", self.step)));
        }
        let d = self.cfg.d;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = self.embed.row(token).iter().zip(self.pos.row(self.step)).map(|(a, b)| a + b).collect();
        for b in &mut self.blocks {
            let h = layer_norm_row(&x, &b.ln1);
            let q = vec_mat(&h, &b.wq);
            b.cache_k.push(vec_mat(&h, &b.wk));
            b.cache_v.push(vec_mat(&h, &b.wv));
            let np = b.mem_k.rows();
            let mut cat = vec![0.0; d];
            for hd in 0..self.cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let dot = |k: &[f64]| k[cols.clone()].iter().zip(&q[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                let mut s: Vec<f64> = (0..np).map(|j| dot(b.mem_k.row(j))).collect();
                s.extend(b.cache_k.iter().map(|k| dot(k)));
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for (j, &w) in s.iter().enumerate() {
                    let vrow = if j < np { b.mem_v.row(j) } else { &b.cache_v[j - np][..] };
                    for c in cols.clone() {
                        cat[c] += w / total * vrow[c];
                    }
                }
            }
            for (xi, a) in x.iter_mut().zip(vec_mat(&cat, &b.wo)) {
                *xi += a;
            }
            let h2 = layer_norm_row(&x, &b.ln2);
            let mut f = vec_mat(&h2, &b.ff1.0);
            for (fi, bi) in f.iter_mut().zip(&b.ff1.1) {
                *fi = gelu(*fi + bi);
            }
            for ((xi, fi), bi) in x.iter_mut().zip(vec_mat(&f, &b.ff2.0)).zip(&b.ff2.1) {
                *xi += fi + bi;
            }
        }
        self.step += 1;
        let h = layer_norm_row(&x, &self.lnf);
        Ok(vec_mat(&h, &self.out.0).iter().zip(&self.out.1).map(|(a, b)| a + b).collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` tokens; returns the
/// generated tokens without BOS.
pub fn greedy(store: &ParameterStore, cfg: &DecoderConfig, prefix: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let max_len = max_len.min(cfg.max_len);
    let mut inc = Incremental::new(store, cfg, prefix)?;
    let mut out = Vec::new();
    let mut tok = BOS;
    while out.len() < max_len {
        tok = argmax(&inc.push(tok)?);
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParameterStore, DecoderConfig, Tensor) {
        let cfg = DecoderConfig { d: 8, heads: 2, layers: 2, ff: 16, max_len: 12 };
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(4);
        init(&mut store, &mut rng, &cfg).unwrap();
        (store, cfg, rng.normal_tensor(&[5, 8], 1.0))
    }

    fn teacher(store: &ParameterStore, cfg: &DecoderConfig, prefix: &Tensor, inputs: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let p = g.constant(prefix.clone());
        let l = forward(&mut g, store, cfg, p, inputs).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn incremental_matches_teacher_forcing() {
        let (store, cfg, prefix) = setup();
        let inputs = [BOS, 7, 2, 20, 3, 9];
        let full = teacher(&store, &cfg, &prefix, &inputs);
        let mut inc = Incremental::new(&store, &cfg, &prefix).unwrap();
        for (t, &tok) in inputs.iter().enumerate() {
            let row = inc.push(tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let (store, cfg, prefix) = setup();
        let a = teacher(&store, &cfg, &prefix, &[BOS, 7, 2, 20]);
        let b = teacher(&store, &cfg, &prefix, &[BOS, 7, 9, 11]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn ties_pick_lowest_index_and_eos_stops() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let (mut store, cfg, prefix) = setup();
        let mut bias = vec![0.0; VOCAB_SIZE];
        bias[EOS] = 1e6;
        store.set_value("dec.out.b", Tensor::new(vec![1, VOCAB_SIZE], bias).unwrap()).unwrap();
        assert_eq!(greedy(&store, &cfg, &prefix, 10).unwrap(), vec![EOS]);
        let (store, cfg, prefix) = setup();
        assert!(greedy(&store, &cfg, &prefix, 3).unwrap().len() <= 3);
        assert_eq!(greedy(&store, &cfg, &prefix, 12).unwrap(), greedy(&store, &cfg, &prefix, 12).unwrap());
    }

    #[test]
    fn input_length_is_bounded() {
        let (store, cfg, prefix) = setup();
        let mut g = Graph::new();
        let p = g.constant(prefix);
        assert!(forward(&mut g, &store, &cfg, p, &[BOS; 13]).is_err());
        assert!(forward(&mut g, &store, &cfg, p, &[]).is_err());
    }
}
