//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index {index} out of range 0..{bound} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value while evaluating {0}")]
    Evaluation(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Calibration(_) | Error::Audit(_) => 2,
            Error::Format(_)
            | Error::Consistency(_)
            | Error::Parse { .. }
            | Error::Partition(_)
            | Error::Dimension { .. }
            | Error::Index { .. }
            | Error::Aggregation(_) => 3,
            Error::Divergence(_) | Error::Evaluation(_) => 4,
            Error::Io { .. } => 5,
        }
    }
}
