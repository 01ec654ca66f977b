use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("unsatisfiable target: {0}")]
    Unsatisfiable(String),

    #[error("invariant violated at {count} pixel(s): {what}")]
    InvariantViolation { what: String, count: usize },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("reconstruction diverged at iteration {iter}: cost = {cost}")]
    Divergence { iter: usize, cost: f64 },

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonConvergence(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
