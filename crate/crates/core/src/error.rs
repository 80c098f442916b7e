use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum MeowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    /// A non-finite value stopped training at environment step `step`.
    #[error("non-finite {what} at step {step}")]
    Diverged { what: &'static str, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MeowError> = std::result::Result<T, E>;
