use std::path::PathBuf;

use geodiffussr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("invalid input value: {0}")]
    InvalidInput(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing conditioning: {0}")]
    MissingConditioning(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("empty stratum for biome `{0}`")]
    EmptyStratum(String),
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("manifest references missing files: {0:?}")]
    MissingFiles(Vec<PathBuf>),
    #[error("manifest validation failed: {0}")]
    Manifest(String),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("weight file: {0}")]
    Weights(String),
    #[error("text provider unavailable: {0}; use the `hash` provider for hermetic runs")]
    ProviderUnavailable(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
