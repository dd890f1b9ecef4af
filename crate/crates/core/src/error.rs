use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum VcpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("backbone weight `{0}` is missing")]
    MissingWeight(String),
    #[error("backbone weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dataset error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VcpError>;

pub(crate) fn data_err(path: impl Into<PathBuf>, reason: impl Into<String>) -> VcpError {
    VcpError::Data {
        path: path.into(),
        reason: reason.into(),
    }
}
