use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Checkpoint(#[from] msm_tensor::checkpoint::CheckpointError),
    #[error("rating rejected: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl MsmError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File { path: path.into(), source }
    }
}
