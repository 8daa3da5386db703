use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TabsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TabsError {
    /// Shape, hyperparameter or config-file problems detected before any work is done.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse such as calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl TabsError {
    pub fn config(msg: impl Into<String>) -> Self {
        TabsError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        TabsError::Data(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        TabsError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        TabsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TabsError::Config(_) => "config",
            TabsError::Usage(_) => "usage",
            TabsError::Format { .. } => "format",
            TabsError::Data(_) => "data",
            TabsError::MissingFile(_) => "missing_file",
            TabsError::UndefinedMetric(_) => "undefined_metric",
            TabsError::Numeric(_) => "numeric",
            TabsError::Io { .. } => "io",
            TabsError::Csv(_) => "csv",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TabsError::Config(_) | TabsError::Usage(_) => 1,
            TabsError::Format { .. }
            | TabsError::Data(_)
            | TabsError::MissingFile(_)
            | TabsError::UndefinedMetric(_)
            | TabsError::Io { .. }
            | TabsError::Csv(_) => 2,
            TabsError::Numeric(_) => 3,
        }
    }
}
