use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Input fails a validation rule (bad geometry, out-of-range value, ...).
    #[error("{0}")]
    Domain(String),

    #[error("logistic fit diverged (likely complete separation): |gamma| exceeded {0}")]
    Separation(f64),

    #[error("information matrix is singular; features are collinear or constant")]
    SingularFit,

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("non-finite state at cell ({row}, {col}) on step {step}")]
    NonFinite { row: usize, col: usize, step: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
