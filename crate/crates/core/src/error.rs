//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or coordinate dimensions do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation received an empty input it cannot handle.
    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A file could not be parsed. `offset` is the byte position of the
    /// first unparseable content.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    /// Input length violates a pipeline contract (e.g. the canonical
    /// snippet length for the fixed-size spectrogram path).
    #[error("length error: {0}")]
    Length(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or manifest problem.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted on a numerical failure (NaN gradient etc.).
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
