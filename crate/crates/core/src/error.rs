use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("click ({row}, {col}) is outside a {height}x{width} image")]
    OutOfBounds {
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },

    #[error("class {class} is not present in record {id}")]
    ClassAbsent { id: String, class: u8 },

    #[error("need {needed} eligible records for class {class}, found {found}")]
    InsufficientRecords {
        class: u8,
        needed: usize,
        found: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("png decode error: {0}")]
    Png(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
