use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("count mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no samples to draw from")]
    ExhaustedClass(usize),

    #[error("client {0} is missing from the gradient cache")]
    MissingClient(usize),

    #[error("facility value is undefined for an empty subset")]
    EmptySubset,

    #[error("time budget exhausted: {remaining_s:.6} s left for {rounds_left} round(s)")]
    BudgetExhausted { remaining_s: f64, rounds_left: usize },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation error: {0}")]
    Validation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
