//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary container (weights, IDX, netpbm) is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The file is syntactically valid but a variant we do not read.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// The network architecture cannot support the requested operation.
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    /// A gradient-based attack met an exactly-zero gradient.
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    /// DeepFool found no usable boundary direction.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Boundary attack could not find a starting adversarial point.
    #[error("initialization failed: {0}")]
    Initialization(String),

    /// Too many per-sample failures for an experiment to be meaningful.
    #[error("experiment aborted: {0}")]
    Aborted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
