use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detector library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: malformed label line: {reason}")]
    LabelParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("non-finite values in head {head} output")]
    NonFinite { head: usize },

    #[error("training aborted: non-finite loss at step {step}; batch images: {batch_ids:?}")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
