use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdfError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unknown class label {label} (model has {n_classes} classes)")]
    Label { label: usize, n_classes: usize },

    #[error("non-finite value in tensor data at index {0}")]
    NonFinite(usize),

    #[error("audio format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<hound::Error> for NdfError {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => NdfError::Io(e),
            other => NdfError::Format(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for NdfError {
    fn from(err: serde_json::Error) -> Self {
        NdfError::Checkpoint(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NdfError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NdfError::Dimension(msg.into()))
}
