use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or table dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A text file could not be parsed.
    #[error("{path}: line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch} during {phase} phase")]
    NonFinite { epoch: usize, phase: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
