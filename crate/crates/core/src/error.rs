//! Error types shared by the whole crate.

use thiserror::Error;

/// Errors produced by linear algebra, data generation, model evaluation and
/// training.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or an operation that needs more samples than given.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid scalar argument (negative noise level, out-of-range input, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A `LadderSpec` that does not describe a valid network.
    #[error("spec error: {0}")]
    Spec(String),

    /// Numerical failure: iteration did not converge or a non-finite value
    /// appeared where one must not.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A matrix that must be (strictly) positive definite is not; carries the
    /// offending eigenvalues.
    #[error("singular matrix in {context}: eigenvalues {eigenvalues:?} at or below floor")]
    Singular {
        context: String,
        eigenvalues: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed CSV or manifest content on import.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
