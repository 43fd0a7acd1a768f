use thiserror::Error;

pub type Result<T> = std::result::Result<T, GazeError>;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error(transparent)]
    Numerics(#[from] gazeirl_numerics::NumericsError),
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("image error")]
    Image(#[from] image::ImageError),
    #[error("json error")]
    Json(#[from] serde_json::Error),
    /// Data failed validation; one message per violation.
    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl GazeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GazeError::Invalid(msg.into())
    }
}
