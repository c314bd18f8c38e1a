use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("crop size {size} exceeds image dimensions {height}x{width}")]
    CropTooLarge { size: usize, height: usize, width: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("{field} has {tokens} tokens, budget is {max}")]
    TokenBudgetExceeded { field: String, tokens: usize, max: usize },

    #[error("channel count {0} must be even")]
    OddChannelCount(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("spatial size {height}x{width} is not divisible by {factor}")]
    IndivisibleSpatialSize { height: usize, width: usize, factor: usize },

    #[error("reduction ratio {ratio} does not divide {channels} channels")]
    BadReduction { ratio: usize, channels: usize },

    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no counterpart for {id} in {dir}")]
    MissingCounterpart { id: String, dir: PathBuf },

    #[error("training diverged at epoch {epoch}, step {step}: total loss {value}")]
    DivergedLoss { epoch: usize, step: u64, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("text sidecar required but not available: {0}")]
    MissingText(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
