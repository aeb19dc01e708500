//! Error type shared by the whole pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QmrError {
    /// File does not look like a QMRSTACK container at all.
    #[error("format error: {0}")]
    Format(String),

    /// Container recognized but header and payload disagree.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Input data violates a precondition (NaN, dimension mismatch, out of range).
    #[error("invalid input: {0}")]
    Validation(String),

    /// Input is structurally valid but degenerate for the requested operation
    /// (constant image, zero entropy, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configuration value is out of its allowed range.
    #[error("config error: {0}")]
    Config(String),

    /// An iterative solver failed to produce a usable result.
    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QmrError>;

impl QmrError {
    /// Process exit code convention: 2 config, 3 data, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            QmrError::Config(_) => 2,
            QmrError::Format(_)
            | QmrError::Corrupt(_)
            | QmrError::Validation(_)
            | QmrError::Degenerate(_)
            | QmrError::Io(_)
            | QmrError::Json(_) => 3,
            QmrError::Convergence(_) => 4,
        }
    }
}
