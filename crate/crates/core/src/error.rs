use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("budget {0} is outside (0, 1]")]
    InvalidBudget(f64),
    #[error("head mask is empty")]
    EmptyMask,
    #[error("per-layer floor needs at least {layers} heads but the budget keeps {k}")]
    InfeasibleFloor { k: usize, layers: usize },
    #[error("head count {k} is outside [1, {total}]")]
    InvalidHeadCount { k: usize, total: usize },
    #[error("mask is not binary: entry ({layer}, {head}) = {value}")]
    NonBinaryMask { layer: usize, head: usize, value: f64 },
    #[error("mask has shape {got:?}, model expects [{layers}, {heads}]")]
    MaskShape { got: Vec<usize>, layers: usize, heads: usize },
    #[error("invalid model configuration: {0}")]
    ModelConfig(String),
    #[error("invalid training configuration: {0}")]
    TrainConfig(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("empty batch or split: {0}")]
    Empty(String),
    #[error("checkpoint has no gate parameters")]
    MissingGates,
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },
    #[error("check `{check}` failed: {detail}")]
    CheckFailed { check: &'static str, detail: String },
    #[error("seed sets differ: {0}")]
    SeedMismatch(String),
    #[error("Spearman correlation undefined: {0}")]
    DegenerateRanking(String),
    #[error("cannot pin the benchmark to one thread: {0}")]
    ThreadPinning(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
