use thiserror::Error;

use crate::tensor::Array;

/// Error type shared across the crate.
///
/// `ShapeMismatch` and `Contract` cover violated call contracts,
/// `Config` covers rejected configurations (bad hyperparameters, sizes
/// that do not divide, unknown keys), and `NonFinite` covers runtime
/// numeric failures that abort a computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rejected configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A sampling chain hit a non-finite intermediate; carries the chain
    /// states walked so far as `(name, state)` pairs for a trajectory dump.
    #[error("sampler aborted: {message}")]
    SamplerAbort { message: String, dump: Vec<(String, Array)> },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }
}
