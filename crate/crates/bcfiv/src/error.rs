use thiserror::Error;

/// Errors surfaced by the library. User errors (bad schema, bad arguments,
/// bad data) are distinguished from I/O failures so the CLI can map them to
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("report error: {0}")]
    Report(String),

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
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
