use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("mode index {mode} out of range for a tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("factor list is empty")]
    EmptyFactorList,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("row {row} is not unit norm (norm {norm})")]
    NotOblique { row: usize, norm: f64 },

    #[error("degenerate draw: {0}")]
    Degenerate(String),

    #[error("rank deficient operator: smallest eigenvalue {min_eig:e} vs largest {max_eig:e}")]
    RankDeficient { min_eig: f64, max_eig: f64 },

    #[error("training failed at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {expected} bytes expected, found {actual} (trailing data)")]
    TrailingBytes {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than by inputs or files.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. } | Error::Degenerate(_) => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
