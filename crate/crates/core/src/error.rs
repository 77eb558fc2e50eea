use std::io;

use crate::tensor::ArchiveError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing entry: {0}")]
    Missing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// An error raised while running one stage of the pipeline for one layer.
    #[error("layer `{layer}`, stage {stage}: {source}")]
    Stage {
        layer: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn missing(msg: impl Into<String>) -> Self {
        Error::Missing(msg.into())
    }

    pub fn in_stage(self, layer: &str, stage: &'static str) -> Self {
        Error::Stage {
            layer: layer.to_string(),
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error comes from the filesystem rather than from
    /// validating inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
