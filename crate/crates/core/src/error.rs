use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("disparity must be positive, got {0}")]
    NonPositiveDisparity(f64),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("no readable images in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("dataset path does not exist: {}", .0.display())]
    MissingDataset(PathBuf),

    #[error("non-finite loss `{name}` ({value})")]
    NonFiniteLoss { name: String, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trajectory: {0}")]
    Trajectory(String),

    #[error("sequence of length {len} is shorter than window {window}")]
    SequenceTooShort { len: usize, window: usize },

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image decode: {0}")]
    Decode(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
