use std::io;
use std::path::Path;

use thiserror::Error;

/// Every failure carries a category so front ends can prefix messages
/// (`format`, `lookup`, `consistency`, `validation`, `io`, `precondition`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {field}: {message}")]
    Format { field: String, message: String },

    #[error("lookup error: no tensor named {0:?}")]
    Lookup(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Lookup(_) => "lookup",
            Error::Consistency(_) => "consistency",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
            Error::Precondition(_) => "precondition",
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            context: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
