//! Crate-level error type for pipeline, file-format, and configuration failures.

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("stage '{stage}' failed at sample {sample}: {message}")]
    Stage {
        stage: &'static str,
        sample: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach experiment-stage context to an error.
    pub fn in_stage(stage: &'static str, sample: usize, err: impl std::fmt::Display) -> Self {
        Error::Stage {
            stage,
            sample,
            message: err.to_string(),
        }
    }
}
