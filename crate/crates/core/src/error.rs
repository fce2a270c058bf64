use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prediction parameterization mismatch: {0}")]
    ParameterizationMismatch(String),

    #[error("pipeline mismatch: {0}")]
    PipelineMismatch(String),

    #[error("{stage} diverged at iteration {iteration} (non-finite loss)")]
    Diverged { stage: String, iteration: usize },

    #[error("frozen feature extractor was modified (checksum {expected} -> {got})")]
    FrozenViolation { expected: String, got: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ParameterizationMismatch(_) => "parameterization_mismatch",
            Error::PipelineMismatch(_) => "pipeline_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::FrozenViolation { .. } => "frozen_violation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub(crate) fn ensure_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
