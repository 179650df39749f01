use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("inpainting mask covers the entire image; no known pixels to propagate from")]
    NothingToInpaint,

    #[error("non-finite loss ({value}) at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("missing masks for images: {}", .0.join(", "))]
    MissingMasks(Vec<String>),

    #[error("duplicate stem in dataset: {0}")]
    DuplicateStem(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
