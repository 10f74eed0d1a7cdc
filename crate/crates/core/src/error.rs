use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("cannot decode {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    /// A configuration problem attributable to one named field or path.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// Files present on only one side of a paired directory comparison.
    #[error("unmatched filenames: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::NotFound(_) | Error::Argument(_)
        )
    }
}
