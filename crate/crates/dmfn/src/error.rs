//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value-range or shape contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / mask / image input problems.
    #[error("data error: {0}")]
    Data(String),

    /// A loss or activation became non-finite during training.
    #[error("non-finite {term} at iteration {iteration} (batch index {batch_index})")]
    NonFinite {
        term: String,
        iteration: u64,
        batch_index: u64,
    },

    /// Checkpoint or weights file is malformed or failed its integrity check.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Pretrained feature-extractor weights could not be loaded.
    #[error(
        "missing VGG19 weights at '{path}'. Run scripts/fetch_vgg19.py to convert a \
         public torchvision release, or set vgg_weights = \"synthetic:<seed>\" for a \
         seeded random (frozen) extractor"
    )]
    MissingVggWeights { path: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
