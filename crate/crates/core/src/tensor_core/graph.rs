//! Define-by-run reverse-mode tape.
//!
//! Every op evaluates eagerly, appends a node holding its value, and records
//! what the backward pass needs. Nodes are topologically ordered by
//! construction, so `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::tensor::{gemm, sigmoid_scalar};
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    ConstMatMul(Tensor, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    AddConst(Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Bce {
        probs: Var,
        labels: Vec<f64>,
        clamp: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated lookups of the same name
    /// share one node; frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Param(name.to_string()), p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    /// `m · x` for a constant left factor.
    pub fn const_matmul(&mut self, m: &Tensor, x: Var) -> Result<Var> {
        let out = m.matmul(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ConstMatMul(m.clone(), x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(x).zip_map(c, |a, b| a * b)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c.clone()), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(x).zip_map(c, |a, b| a + b)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = super::softmax_lastdim(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut normed = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in normed.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut out = normed.clone();
        for row in out.chunks_mut(c) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let shape = xv.shape().to_vec();
        let normed = Tensor::from_parts(shape.clone(), normed);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or_else(|| Error::contract("concat_cols of an empty list"))?;
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::dim("concat_cols", &[rows], self.value(*p).shape()));
            }
        }
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::dim("slice_rows", xv.shape(), &[start, len]));
        }
        let c = xv.cols();
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows(x, start),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rows = xv.rows();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::dim("gather_rows", tv.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * tv.cols());
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let c = tv.cols();
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    /// Column-wise mean, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, probs: Var, labels: &[f64], clamp: f64) -> Result<Var> {
        let pv = self.value(probs);
        if labels.is_empty() {
            return Err(Error::contract("bce over an empty batch"));
        }
        if pv.len() != labels.len() {
            return Err(Error::dim("bce", pv.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                clamp,
            },
            rg,
        ))
    }

    /// Mean token negative log-likelihood of `targets` under row-wise softmax
    /// of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::contract(format!(
                "lm loss over {} logit rows but {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::dim("cross_entropy", lv.shape(), &[bad]));
        }
        let probs = super::softmax_lastdim(lv);
        let c = lv.cols();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        debug_assert_eq!(probs.cols(), c);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / targets.len() as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back to every trainable parameter reached,
    /// adding into the store's gradient accumulators.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => store.accumulate(name, &dy)?,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, dy.data(), false, bv.data(), true, &mut da, 0.0);
                        self.acc(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, dy.data(), false, &mut db, 0.0);
                        self.acc(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, dy.data(), false, bv.data(), false, &mut da, 0.0);
                        self.acc(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, dy.data(), true, av.data(), false, &mut db, 0.0);
                        self.acc(&mut grads, *b, Tensor::from_parts(vec![n, k], db));
                    }
                }
                Op::ConstMatMul(mat, x) => {
                    let (r, c) = (mat.rows(), mat.cols());
                    let n = dy.cols();
                    let mut dx = vec![0.0; c * n];
                    gemm(c, r, n, mat.data(), true, dy.data(), false, &mut dx, 0.0);
                    self.acc(&mut grads, *x, Tensor::from_parts(vec![c, n], dx));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, dy.clone());
                    self.acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, dy.scale(-1.0));
                    self.acc(&mut grads, *a, dy);
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let c = dy.cols();
                        let mut db = vec![0.0; c];
                        for row in dy.data().chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        self.acc(&mut grads, *bias, Tensor::from_parts(shape, db));
                    }
                    self.acc(&mut grads, *x, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        self.acc(&mut grads, *a, dy.zip_map(bv, |d, y| d * y)?);
                    }
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, dy.zip_map(av, |d, x| d * x)?);
                    }
                }
                Op::MulConst(x, c) => {
                    self.acc(&mut grads, *x, dy.zip_map(c, |d, k| d * k)?);
                }
                Op::AddConst(x) => self.acc(&mut grads, *x, dy),
                Op::Scale(x, s) => self.acc(&mut grads, *x, dy.scale(*s)),
                Op::Tanh(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| d * (1.0 - y * y))?;
                    self.acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 })?;
                    self.acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let dx = dy.zip_map(self.value(*x), |d, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })?;
                    self.acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy.zip_map(&node.value, |d, y| d * y * (1.0 - y))?;
                    self.acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let c = dy.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for ((out, d), y) in dx
                        .chunks_mut(c)
                        .zip(dy.data().chunks(c))
                        .zip(node.value.data().chunks(c))
                    {
                        let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((o, di), yi) in out.iter_mut().zip(d).zip(y) {
                            *o = yi * (di - dot);
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_parts(dy.shape().to_vec(), dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let c = dy.cols();
                    let gv = self.value(*gamma);
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for (d, n) in dy.data().chunks(c).zip(normed.data().chunks(c)) {
                            for j in 0..c {
                                dg[j] += d[j] * n[j];
                                db[j] += d[j];
                            }
                        }
                        let gs = gv.shape().to_vec();
                        let bs = self.value(*beta).shape().to_vec();
                        self.acc(&mut grads, *gamma, Tensor::from_parts(gs, dg));
                        self.acc(&mut grads, *beta, Tensor::from_parts(bs, db));
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; dy.len()];
                        for (r, ((out, d), n)) in dx
                            .chunks_mut(c)
                            .zip(dy.data().chunks(c))
                            .zip(normed.data().chunks(c))
                            .enumerate()
                        {
                            let dn: Vec<f64> = d.iter().zip(gv.data()).map(|(a, g)| a * g).collect();
                            let mean_dn = dn.iter().sum::<f64>() / c as f64;
                            let mean_dn_n =
                                dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                out[j] = inv_std[r] * (dn[j] - mean_dn - n[j] * mean_dn_n);
                            }
                        }
                        self.acc(&mut grads, *x, Tensor::from_parts(dy.shape().to_vec(), dx));
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = dy.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.requires_grad(*p) {
                            let slice = dy.data()[offset * c..(offset + r) * c].to_vec();
                            let shape = self.value(*p).shape().to_vec();
                            self.acc(&mut grads, *p, Tensor::from_parts(shape, slice));
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        if self.requires_grad(*p) {
                            let mut out = Vec::with_capacity(dy.rows() * pc);
                            for r in 0..dy.rows() {
                                out.extend_from_slice(&dy.row(r)[offset..offset + pc]);
                            }
                            let shape = self.value(*p).shape().to_vec();
                            self.acc(&mut grads, *p, Tensor::from_parts(shape, out));
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    self.acc(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let (c, len) = (xv.cols(), dy.cols());
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        dx[r * c + start..r * c + start + len].copy_from_slice(dy.row(r));
                    }
                    self.acc(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::GatherRows(table, idx) => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in dt[i * c..(i + 1) * c].iter_mut().zip(dy.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(&mut grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let r = xv.rows() as f64;
                    let mut dx = Vec::with_capacity(xv.len());
                    for _ in 0..xv.rows() {
                        dx.extend(dy.data().iter().map(|d| d / r));
                    }
                    self.acc(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, Tensor::filled(&shape, dy.item()));
                }
                Op::Bce {
                    probs,
                    labels,
                    clamp,
                } => {
                    let pv = self.value(*probs);
                    let n = labels.len() as f64;
                    let g = dy.item();
                    let dp: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p < *clamp || p > 1.0 - clamp {
                                0.0
                            } else {
                                -g / n * (y / p - (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    self.acc(&mut grads, *probs, Tensor::from_parts(pv.shape().to_vec(), dp));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = dy.item() / targets.len() as f64;
                    let c = probs.cols();
                    let mut dl = probs.data().to_vec();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * c + t] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    self.acc(&mut grads, *logits, Tensor::from_parts(probs.shape().to_vec(), dl));
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::gradcheck::check_gradients;
    use crate::tensor_core::Rng;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = store_with("p", Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let l = g.sum(p);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_p() {
        let p0 = Tensor::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.0]]).unwrap();
        let mut store = store_with("p", p0.clone());
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad, p0.scale(2.0));
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut store = store_with("p", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        assert!(matches!(g.backward(p, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::scalar(2.0)).unwrap();
        store.insert("b", Tensor::scalar(3.0)).unwrap();
        store.train_only(&["a"]);
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let ab = g.mul(a, b).unwrap();
        let l = g.sum(ab);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().grad.item(), 3.0);
        assert_eq!(store.get("b").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = Rng::new(9);
        let mut store = ParameterStore::new();
        store.insert("a", rng.normal_tensor(&[4, 3], 1.0)).unwrap();
        store.insert("b", rng.normal_tensor(&[3, 5], 1.0)).unwrap();
        store.insert("c", rng.normal_tensor(&[4, 3], 1.0)).unwrap();
        store.insert("bias", rng.normal_tensor(&[1, 5], 1.0)).unwrap();
        store.insert("gamma", rng.normal_tensor(&[1, 5], 1.0)).unwrap();
        store.insert("beta", rng.normal_tensor(&[1, 5], 1.0)).unwrap();
        store.insert("table", rng.normal_tensor(&[6, 3], 1.0)).unwrap();
        let pool = rng.normal_tensor(&[2, 4], 1.0);
        let mask = rng.normal_tensor(&[4, 5], 1.0);

        let forward = |g: &mut Graph, s: &ParameterStore| -> Result<Var> {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.param(s, "c")?;
            let bias = g.param(s, "bias")?;
            let gamma = g.param(s, "gamma")?;
            let beta = g.param(s, "beta")?;
            let table = g.param(s, "table")?;
            let ac = g.sub(a, c)?;
            let ac = g.add(ac, a)?;
            let x = g.matmul(ac, b)?;
            let x = g.add_row(x, bias)?;
            let x = g.layer_norm(x, gamma, beta)?;
            let x = g.gelu(x);
            let x = g.mul_const(x, &mask)?;
            let sm = g.softmax(x);
            let t = g.tanh(x);
            let r = g.relu(x);
            let t = g.add(t, r)?;
            let y = g.mul(sm, t)?;
            let emb = g.gather_rows(table, &[0, 2, 2, 5])?;
            let z = g.matmul_nt(emb, c)?;
            let z = g.const_matmul(&pool, z)?;
            let z = g.scale(z, 0.7);
            let left = g.slice_cols(y, 1, 3)?;
            let top = g.slice_rows(left, 0, 2)?;
            let zz = g.slice_cols(z, 0, 3)?;
            let both = g.concat_rows(&[top, zz])?;
            let wide = g.concat_cols(&[both, both])?;
            let m = g.mean_rows(wide);
            let sig = g.sigmoid(m);
            let ce_in = g.slice_rows(y, 0, 3)?;
            let ce = g.cross_entropy(ce_in, &[0, 4, 2])?;
            let bce = g.bce(sig, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0], 1e-12)?;
            let tot = g.add(ce, bce)?;
            let s = g.sum(m);
            g.add(tot, s)
        };
        let report = check_gradients(&mut store, forward, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
