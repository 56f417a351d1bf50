use std::path::PathBuf;

use classwise_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("corrupt sample {id}: {reason}")]
    CorruptSample { id: String, reason: String },
    #[error("scene generation failed after {attempts} rejected attempts (index {index})")]
    GenerationFailed { index: u64, attempts: u32 },
    #[error("depth has holes; inpaint before building network input")]
    HolesNotFilled,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("depth image has no valid pixel")]
    NoValidDepth,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("every pixel carries the ignore label")]
    EmptyLoss,
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    TrainingDiverged { iteration: u64, what: String },
    #[error("no {0} samples available for a batch")]
    EmptyDomainBatch(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(s) => Error::Shape(s),
            TensorError::Invalid(s) => Error::InvalidParam(s),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
