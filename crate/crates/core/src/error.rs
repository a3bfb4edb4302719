use std::io;

use prunas_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid block: {0}")]
    Block(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("data: {0}")]
    Data(String),
    #[error("easiness: {0}")]
    Easiness(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("search diverged at step {step}, epoch {epoch}: {reason}")]
    Diverged {
        step: usize,
        epoch: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
