use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("correlation matrix is not positive definite (pairwise correlation {0})")]
    NotPositiveDefinite(f64),

    #[error("unsupported jump measure: {0}")]
    UnsupportedMeasure(&'static str),

    #[error("non-finite state at step {step}, path {path}")]
    NonFiniteState { step: usize, path: usize },

    #[error("interval on path {path}, step {step} has {count} jumps (cap {cap})")]
    MarkOverflow {
        path: usize,
        step: usize,
        count: usize,
        cap: usize,
    },

    #[error("non-finite network input")]
    NonFiniteInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite regression target on path {path}")]
    NonFiniteTarget { path: usize },

    #[error("training diverged at step {step}, iteration {iteration}")]
    Diverged {
        step: usize,
        iteration: usize,
        trace: Vec<f64>,
    },

    #[error("driver is not linear: {0}")]
    NonlinearDriver(&'static str),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("step {0} has no trained network")]
    Untrained(usize),

    #[error("riccati solution blew up at t = {0}")]
    BlowUp(f64),

    #[error("closed form hits a pole at t = {0}")]
    Pole(f64),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
