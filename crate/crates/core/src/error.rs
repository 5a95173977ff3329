//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Every fallible public operation returns
/// `Result<T, TcsError>`.
#[derive(Debug, Error)]
pub enum TcsError {
    /// Input data violated an invariant (shape, range, finiteness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A config field failed validation; the message names the field.
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A non-finite value (NaN/Inf) appeared in a tensor.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// Checkpoint does not match the model architecture.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Malformed { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TcsError>;

impl TcsError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TcsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        TcsError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
