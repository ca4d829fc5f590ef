//! Dynamic class queue (DCQ) embedding learning at desk scale.
//!
//! Classification-based representation learning where the softmax
//! negatives are class weights generated on the fly by an EMA copy of the
//! feature extractor and kept in a FIFO queue, next to a full-FC CosFace
//! baseline, a synthetic long-tailed identity dataset, and an evaluation
//! harness. See the `examples/` directory for one runnable program per
//! capability.

pub mod baseline;
pub mod cli;
pub mod config;
mod error;
pub mod evalbench;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod queue;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use config::{DataConfig, EvalConfig, Method, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use numerics::Tensor;
