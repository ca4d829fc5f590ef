//! Dense `f64` tensors and a small reverse-mode tape.
//!
//! The tape covers exactly the operations an MLP extractor and the margin
//! softmax heads need. Every backward rule is checked against central
//! differences in the tests below and in the acceptance suite.

mod gradcheck;
mod loss;
mod tape;
mod tensor;

pub use gradcheck::{central_differences, finite_difference_check, relative_error};
pub use loss::{softmax_cross_entropy, LossDiagnostics};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, norm, Tensor};

/// Row-normalization guard used throughout the crate.
pub const NORM_EPS: f64 = 1e-12;

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
