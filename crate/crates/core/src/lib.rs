//! Counterfactual-aware procedural planning on a synthetic household world.
//!
//! The pipeline reranks patch features with task-oriented masks, retrieves
//! counterfactual clauses and pools their visual tokens, and decodes an
//! `action(object)` plan with a small transformer. Plans are scored by a
//! deterministic simulator for executability, LCS similarity and goal
//! correctness.

pub mod assembly;
pub mod car;
pub mod cli;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod maskgrid;
pub mod model;
pub mod planeval;
pub mod ter;
pub mod tensor_core;
pub mod train;
pub mod worldgen;

pub use error::{Error, Result};
