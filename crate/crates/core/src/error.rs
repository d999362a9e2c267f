use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (configuration, files, data), as
    /// opposed to failures inside a computation.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Divergence(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
