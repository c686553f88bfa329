use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TapError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activations at level {level} ({stage})")]
    NonFinite { level: usize, stage: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible checkpoint, differing fields: {}", .fields.join(", "))]
    Incompatible { fields: Vec<String> },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl TapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TapError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TapError::Config(msg.into())
    }
}
