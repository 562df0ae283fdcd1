use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KpbeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KpbeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frame directory {}: {msg}", path.display())]
    Frames { path: PathBuf, msg: String },

    #[error("end of stream")]
    EndOfStream,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KpbeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeMismatch(msg.into())
    }
}
