//! Budget-conditioned attention-head gating for a small transformer encoder.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
