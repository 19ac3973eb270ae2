use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config line that is not `key = value`.
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },

    /// A key that is unknown, duplicated or has an unusable value.
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] waffle_core::Error),
}

impl CliError {
    pub(crate) fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Key {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
