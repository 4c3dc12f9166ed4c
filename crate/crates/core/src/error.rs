use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("message parse error: {0}")]
    Message(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown distortion `{0}`")]
    UnknownDistortion(String),
    #[error("invalid distortion parameter: {0}")]
    DistortionParam(String),
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
