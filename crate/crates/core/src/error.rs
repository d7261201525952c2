use thiserror::Error;

use crate::bpe::BpeError;
use crate::checkpoint::CheckpointError;
use crate::context::ContextError;
use crate::dataset::DatasetError;
use crate::tensor::TensorError;

/// Crate-level error for the model, training, generation and evaluation
/// layers. Lower modules keep their own error types and convert into this.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    /// Invalid configuration; the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
