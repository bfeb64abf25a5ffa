use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("no observed entries")]
    EmptyMask,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column {col}: {value:?} is not a number")]
    Parse { row: usize, col: usize, value: String },

    #[error("domain error at row {row}, column {col}: {value} is negative or non-finite")]
    Domain { row: usize, col: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("division guard: {0}")]
    InfinityGuard(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes and the C error codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) => ErrorKind::Config,
            Error::Numerical(_) | Error::InfinityGuard(_) => ErrorKind::Numerical,
            Error::Dimension { .. }
            | Error::EmptyMask
            | Error::Format(_)
            | Error::Parse { .. }
            | Error::Domain { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn dims(expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::Dimension {
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        }
    }
}
