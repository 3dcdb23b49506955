//! Error type shared across the pipeline.
//!
//! Variants are grouped by how callers should react: configuration and
//! argument errors are caller bugs, degenerate-input and precondition errors
//! describe unusable data, divergence signals a failed training run.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A function argument violates its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data is degenerate (empty ROI, constant image, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A required precondition on state or files does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Monte-Carlo sampling exceeded its pass cap before reaching coverage.
    #[error("mask sampling runaway: {0}")]
    SamplingRunaway(String),

    /// An ensemble does not hold enough reconstructions per patch.
    #[error("incomplete ensemble: {0}")]
    IncompleteEnsemble(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
