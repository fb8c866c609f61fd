//! Dense `f64` arrays with tape-based reverse-mode differentiation.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use graph::{Gradients, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called before any forward pass was recorded")]
    NoForward,
    #[error("graph was already back-propagated; record a new forward pass first")]
    AlreadyBackpropagated,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("finite-difference step {step:e} underflows at parameter value {value:e}")]
    StepUnderflow { step: f64, value: f64 },
}
