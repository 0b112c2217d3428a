use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing ground-truth mask for abnormal test image {image} (expected {expected})")]
    MissingMask { image: PathBuf, expected: PathBuf },

    #[error("ground-truth mask {path} has no positive pixels")]
    EmptyMask { path: PathBuf },

    #[error("mask {path} is {mask_h}x{mask_w} but its image is {image_h}x{image_w}")]
    MaskShape {
        path: PathBuf,
        mask_h: u32,
        mask_w: u32,
        image_h: u32,
        image_w: u32,
    },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("invalid config field `{field}`: expected {expected}")]
    InvalidConfig { field: String, expected: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("shape mismatch at hierarchy level {level}: expert {expert:?} vs apprentice {apprentice:?}")]
    ShapeMismatch {
        level: usize,
        expert: Vec<usize>,
        apprentice: Vec<usize>,
    },

    #[error("hierarchies {requested:?} are not available in checkpoint taps {available:?}")]
    HierarchyMismatch {
        requested: Vec<usize>,
        available: Vec<usize>,
    },

    #[error("pretrained weights for {backbone} not found at {path}; {hint}")]
    MissingWeights {
        backbone: String,
        path: PathBuf,
        hint: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid_config(field: impl Into<String>, expected: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            expected: expected.into(),
        }
    }
}
