//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for an operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received an input it cannot process.
    #[error("invalid input to {op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    /// A configuration value failed validation.
    #[error("invalid config: field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// A corpus-level constraint was violated.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Non-finite values encountered where finite ones are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
