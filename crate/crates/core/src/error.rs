use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Spatial size incompatible with the encoder stride.
    #[error("frame {height}x{width} is not usable: {hint}")]
    Padding {
        height: usize,
        width: usize,
        hint: String,
    },

    #[error("temporal window out of range: {0}")]
    Window(String),

    #[error("flow backend unavailable: {0}")]
    Backend(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
