//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller-side contract was violated (preconditions, wrong node kind, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Problem with an external data file (CIFAR batches, CSV inputs).
    #[error("{path}: {detail}")]
    Data { path: String, detail: String },

    /// Malformed or truncated checkpoint file.
    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    /// Invalid run configuration; `field` is the JSON-ish path of the offender.
    #[error("config error at {field}: {detail}")]
    Config { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
