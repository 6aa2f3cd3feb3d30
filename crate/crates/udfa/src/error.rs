use std::path::PathBuf;

use thiserror::Error;
use udfa_core::ConfigError;

#[derive(Debug, Error)]
pub enum UdfaError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss {value} at iteration {iteration} on batch [{batch}]")]
    NonFiniteLoss {
        value: f64,
        iteration: usize,
        batch: String,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl UdfaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UdfaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            UdfaError::Config(_) => 2,
            UdfaError::Data(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = UdfaError> = std::result::Result<T, E>;
