//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received data in the wrong representation
    /// (e.g. a k-space transform applied to an image-domain volume).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (bad grid sizes, acceleration factors, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerical failure (non-positive-definite covariance, divergence, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent stored data (manifests, checkpoints, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
