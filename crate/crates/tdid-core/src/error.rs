//! Error type shared by all modules of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature-map extents do not satisfy an operation's contract.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A model or generator configuration violates one of its invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An optimizer step was requested for a parameter whose gradient was
    /// never populated by a backward pass.
    #[error("uninitialized gradient for parameter `{0}`")]
    UninitializedGradient(String),

    /// A detection query referenced a target id absent from the feature cache.
    #[error("unknown target id `{0}`")]
    MissingTarget(String),

    /// Box regression deltas contained NaN or infinity.
    #[error("non-finite box regression delta")]
    InvalidDelta,

    /// A binary file (PPM image or checkpoint) could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Manifest validation failed; every violation is listed.
    #[error("invalid manifest:\n{}", .0.join("\n"))]
    Manifest(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
