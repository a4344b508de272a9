//! Dense `f64` arrays, a reverse-mode tape, seeded randomness, and Adam.

mod graph;
pub mod gradcheck;
mod rng;
mod store;
mod tensor;

pub use graph::{Graph, Var};
pub use rng::Rng;
pub use store::{
    AdamConfig, Checkpoint, ParamRecord, Parameter, ParameterStore, CHECKPOINT_FORMAT_VERSION,
};
pub use tensor::{sigmoid, sigmoid_scalar, softmax_lastdim, Tensor};

/// Scaled-normal initializer (`std = gain / sqrt(fan_in)`).
pub fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    rng.normal_tensor(&[fan_in, fan_out], gain / (fan_in as f64).sqrt())
}
