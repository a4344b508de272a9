//! Shared projector and assembly of the decoder input sequence
//! `[Proj(v_rerank); s_cf; Proj(v_cf); text]`.

use crate::encoders::{sinusoid, TEXT_EMBED};
use crate::error::{Error, Result};
use crate::tensor_core::{init_weight, Graph, ParameterStore, Rng, Tensor, Var};

pub const PROJ_W1: &str = "proj.w1";
pub const PROJ_B1: &str = "proj.b1";
pub const PROJ_W2: &str = "proj.w2";
pub const PROJ_B2: &str = "proj.b2";
pub const PROMPT: &str = "scf";
pub const TEXT_W: &str = "textmap.w";
pub const TEXT_B: &str = "textmap.b";

pub fn init(store: &mut ParameterStore, rng: &mut Rng, c: usize, hidden: usize, d: usize) -> Result<()> {
    store.insert(PROJ_W1, init_weight(rng, c, hidden, 2f64.sqrt()))?;
    // A small positive bias keeps all-zero pooled tokens off the ReLU kink.
    store.insert(PROJ_B1, Tensor::filled(&[1, hidden], 0.01))?;
    store.insert(PROJ_W2, init_weight(rng, hidden, d, 1.0))?;
    store.insert(PROJ_B2, Tensor::zeros(&[1, d]))?;
    store.insert(PROMPT, rng.normal_tensor(&[1, d], 0.1))?;
    store.insert(TEXT_W, init_weight(rng, c, d, 1.0))?;
    store.insert(TEXT_B, Tensor::zeros(&[1, d]))?;
    Ok(())
}

/// Row-wise `relu(x W1 + b1) W2 + b2`.
pub fn project(g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        g.param(store, PROJ_W1)?,
        g.param(store, PROJ_B1)?,
        g.param(store, PROJ_W2)?,
        g.param(store, PROJ_B2)?,
    );
    if g.value(x).cols() != g.value(w1).rows() {
        return Err(Error::dim("project", &[g.value(w1).rows()], &[g.value(x).cols()]));
    }
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// Clause-token embeddings mapped to the decoder width, plus a fixed
/// sinusoidal position code.
pub fn text_tokens(g: &mut Graph, store: &ParameterStore, ids: &[usize]) -> Result<Var> {
    let table = g.param(store, TEXT_EMBED)?;
    let rows = g.gather_rows(table, ids)?;
    let (w, b) = (g.param(store, TEXT_W)?, g.param(store, TEXT_B)?);
    let x = g.matmul(rows, w)?;
    let x = g.add_row(x, b)?;
    let d = g.value(x).cols();
    let pos: Vec<f64> = (0..ids.len()).flat_map(|p| sinusoid(p, d)).collect();
    g.add_const(x, &Tensor::new(vec![ids.len(), d], pos)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Rerank,
    Prompt,
    Ctrf,
    Text,
}

#[derive(Clone, Debug)]
pub struct InputSequence {
    pub tokens: Var,
    pub segments: Vec<(Segment, usize)>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tag of every row, in order.
    pub fn tags(&self) -> Vec<Segment> {
        self.segments
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
            .collect()
    }
}

/// Concatenates the four segments in their fixed order. `text` must already
/// be at decoder width.
pub fn assemble_input(
    g: &mut Graph,
    store: &ParameterStore,
    v_rerank: Var,
    v_cf: Var,
    text: Var,
) -> Result<InputSequence> {
    let rerank = project(g, store, v_rerank)?;
    let ctrf = project(g, store, v_cf)?;
    let prompt = g.param(store, PROMPT)?;
    let d = g.value(rerank).cols();
    for part in [prompt, text] {
        if g.value(part).cols() != d {
            return Err(Error::dim("assemble_input", &[d], &[g.value(part).cols()]));
        }
    }
    let segments = vec![
        (Segment::Rerank, g.value(rerank).rows()),
        (Segment::Prompt, 1),
        (Segment::Ctrf, g.value(ctrf).rows()),
        (Segment::Text, g.value(text).rows()),
    ];
    let tokens = g.concat_rows(&[rerank, prompt, ctrf, text])?;
    Ok(InputSequence { tokens, segments })
}
