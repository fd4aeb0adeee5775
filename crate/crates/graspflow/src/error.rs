//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor operations, model assembly, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between operands.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation was called outside its contract (e.g. backward on a
    /// non-scalar).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid configuration, naming the violated rule.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed file contents. `offset` is the byte position where the
    /// problem was detected.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training failure (divergence, non-finite gradients).
    #[error("training error at step {step} ({context}): {detail}")]
    Train {
        step: u64,
        context: String,
        detail: String,
    },

    /// Train/validation split could not be formed.
    #[error("split error: {0}")]
    Split(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 for validation problems the user can
    /// fix in flags or config, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract { .. } | Error::Dimension { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
