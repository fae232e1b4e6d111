use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch at {location}: {detail}")]
    ShapeMismatch { location: String, detail: String },

    /// A forward value overflowed or became NaN.
    #[error("non-finite value produced at {location}")]
    NonFinite { location: String },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    /// A data file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(location: impl Into<String>, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
