//! Crate-wide error type and exit-code mapping for the CLI.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("{op}: dimension mismatch ({lhs} vs {rhs})")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A segment mapping that is empty, out of range, or has empty groups.
    #[error("invalid segments: {0}")]
    InvalidSegments(String),

    /// Non-finite values where finite ones are required, or a diverging run.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A label row that is not a probability vector.
    #[error("invalid label: {0}")]
    InvalidLabel(String),

    /// A line of a clip file that does not parse.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Structurally valid input that violates a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A bad configuration value or an unusable config file.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint that cannot be written, read, or reconciled.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Predictions and ground truth that cannot be matched up.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidLabel(_)
            | Error::Checkpoint(_)
            | Error::Evaluation(_)
            | Error::Io { .. } => 3,
            Error::Dimension { .. } | Error::InvalidSegments(_) | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
