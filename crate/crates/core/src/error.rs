use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// Manifest invariant violation, reported with the offending field path.
    #[error("manifest: {field}: {message}")]
    Manifest { field: String, message: String },

    #[error("dsm file {path}: {message}")]
    Dsm { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    /// Training loss went non-finite; carries a dump of the offending ray.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    TrainingDiverged { iteration: u64, detail: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn manifest(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest { field: field.into(), message: message.into() }
    }
}
