use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("label error: {0}")]
    Labels(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("masking error: {0}")]
    Masking(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
