use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("schema version mismatch at {path}: {reason}")]
    Version { path: PathBuf, reason: String },

    #[error("dataset construction error: {0}")]
    Construction(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or a violated data contract,
    /// as opposed to runtime failures.
    pub fn is_contract(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Version { .. }
                | Error::Construction(_)
                | Error::Sampling(_)
                | Error::Argument(_)
                | Error::Contract(_)
        )
    }
}
