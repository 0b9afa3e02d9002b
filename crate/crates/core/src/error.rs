use std::fs::File;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("cholesky: matrix not positive definite after jitter {jitter:e} (smallest pivot {pivot:e})")]
    NotPositiveDefinite { pivot: f64, jitter: f64 },

    #[error("triangular solve: zero diagonal entry at {index}")]
    Singular { index: usize },

    #[error("{0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data validation: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { op, msg: msg.into() }
    }

    /// Open `path` for reading, naming it in any error.
    pub(crate) fn open(path: &Path) -> Result<File> {
        File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Create or truncate `path`, naming it in any error.
    pub(crate) fn create(path: &Path) -> Result<File> {
        File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Process exit code: 1 usage/config, 2 data validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Data(_) | Error::Parse { .. } | Error::File { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Singular { .. } => 3,
        }
    }
}
