use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the degenerate threshold")]
    DegenerateNorm { norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("assignment {value} out of range 1..={k}")]
    AssignmentOutOfRange { value: usize, k: usize },

    #[error("index {value} out of range 1..={max} for {what}")]
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        max: usize,
    },

    #[error("every surrogate class is nullified")]
    AllNullified,

    #[error("surrogate class {0} is nullified")]
    NullifiedClass(usize),

    #[error("k-means needs at least {k} distinct points, got {distinct}")]
    TooFewPoints { k: usize, distinct: usize },

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("query {query} has no cross-state gallery match")]
    NoValidGallery { query: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
