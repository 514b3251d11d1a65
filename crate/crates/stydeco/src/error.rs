use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] stydeco_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(
        "checkpoint config mismatch ({fields}): checkpoint hash {checkpoint_hash}, current hash {current_hash}"
    )]
    ConfigMismatch {
        fields: String,
        checkpoint_hash: String,
        current_hash: String,
    },
    #[error("distillation: {0}")]
    Distill(String),
    #[error("unpairable files: {}", .0.join(", "))]
    Unpairable(Vec<String>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for serde_json::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}
