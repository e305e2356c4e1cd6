use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum KdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KdError>;

pub(crate) fn invalid(msg: impl Into<String>) -> KdError {
    KdError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> KdError {
    KdError::ShapeMismatch(msg.into())
}

/// Attaches the path to an I/O error message.
pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> KdError + '_ {
    move |e| KdError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
