use thiserror::Error;

/// Unified error type for the whole crate.
///
/// The CLI maps variants onto process exit codes, so the split between
/// usage, data, and numeric failures is part of the public contract.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch detected before running a kernel.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An API contract was violated (wrong tape, missing gradient, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or parameter value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite value or other numeric failure surfaced during compute.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// A dataset file or directory could not be ingested.
    #[error("data error at {path}: {detail}")]
    Data { path: String, detail: String },

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub fn data(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), detail: detail.into() }
    }
}
