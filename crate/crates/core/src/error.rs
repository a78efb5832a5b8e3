use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrmError>;

#[derive(Debug, Error)]
pub enum GrmError {
    #[error("category index {index} out of range for item with {categories} categories")]
    CategoryOutOfRange { index: usize, categories: usize },

    #[error("non-finite value for {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    #[error("invalid item `{id}`: {reason}")]
    InvalidItem { id: String, reason: String },

    #[error("invalid response matrix: {0}")]
    InvalidResponses(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("no calibratable items: every item was observed in a single category")]
    NoCalibratableItems,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl GrmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed user input (CLI exit code 2).
    pub fn is_validation(&self) -> bool {
        !matches!(self, GrmError::Io { .. })
    }
}
