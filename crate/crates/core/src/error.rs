use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants split into two families: configuration/validation problems
/// ([`Error::is_config`]) and runtime failures. The command-line front end
/// maps the former to exit code 2 and the latter to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("vocabulary empty")]
    EmptyVocabulary,

    #[error("no sessions")]
    NoSessions,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown {what}: {key}")]
    Unknown { what: &'static str, key: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or input validation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::EmptyVocabulary)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
