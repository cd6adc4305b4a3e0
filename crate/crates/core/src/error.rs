//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree on shape.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A run configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Checkpoint or report I/O failed.
    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },

    /// A checkpoint file is structurally broken.
    #[error("malformed checkpoint ({path}): {detail}")]
    Checkpoint { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            detail: err.to_string(),
        }
    }

    pub fn checkpoint(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
