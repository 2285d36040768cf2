use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),

    #[error("non-finite loss in term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { context: context.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
