use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("load error for stem `{stem}`: {reason}")]
    Load { stem: String, reason: String },

    #[error("format error for stem `{stem}`: {reason}")]
    Format { stem: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sampling error: needed {needed} eligible images, found {found} (deficit {})", needed - found)]
    Sampling { needed: usize, found: usize },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("embedding failed for image id {id}: {reason}")]
    Embedding { id: String, reason: String },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

/// Broad failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Schedule(_) | Error::Usage(_) | Error::Spec(_) => {
                ErrorKind::Config
            }
            Error::Load { .. }
            | Error::Format { .. }
            | Error::Validation(_)
            | Error::Sampling { .. }
            | Error::Snapshot(_)
            | Error::Io { .. } => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
