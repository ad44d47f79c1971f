use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("step index {t} outside 1..={steps}")]
    StepRange { t: usize, steps: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("reverse step {t} has zero variance; no density is defined")]
    UndefinedDensity { t: usize },

    #[error("tilted target is degenerate: every cell underflowed")]
    DegenerateTarget,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("reward service: {0}")]
    Service(String),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
