use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// File layout or manifest content does not match what the loader expects.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Numerical content is unusable (NaN/Inf, zero rows, out-of-range labels).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Inconsistent inputs handed to an operation (shapes, run lists).
    #[error("input error: {0}")]
    Input(String),

    /// Task-encoder parameters lost rank; the caller should re-initialize.
    #[error("degenerate parameters: pivot norm {pivot:e} at row {row}")]
    Degenerate { row: usize, pivot: f64 },

    #[error("inner solver diverged at step {step}")]
    Divergence { step: usize },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// True for failures of the optimization itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Degenerate { .. } | Error::Divergence { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
