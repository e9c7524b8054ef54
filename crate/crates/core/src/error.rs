use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model is already injected with LoRA layers")]
    AlreadyInjected,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {expected}, model has {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::AlreadyInjected
                | Error::ConfigHashMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
