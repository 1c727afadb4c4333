use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the segmentation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt template {template:?}: expected exactly one `{{class}}` placeholder, found {found}")]
    Template { template: String, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no classes present in {0}")]
    EmptyReport(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("unmapped categories: {}", .0.join(", "))]
    UnmappedCategories(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason} (state dumped to {dump})")]
    TrainingAborted {
        step: u64,
        reason: String,
        dump: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}
