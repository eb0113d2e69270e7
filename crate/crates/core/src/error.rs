use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config errors: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("non-finite {what} at {at}")]
    NonFinite { what: String, at: String },

    #[error("inverse cdf did not converge for u={0}")]
    Convergence(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
