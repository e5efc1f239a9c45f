use std::path::PathBuf;

use koopcast_core::Error as CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ExpError>;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("run {fingerprint}: {source}")]
    Run {
        fingerprint: String,
        #[source]
        source: CoreError,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("audit failed: {0}")]
    AuditFailed(String),

    #[error("grid interrupted after {0} newly computed cells")]
    Interrupted(usize),
}

impl ExpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 configuration, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Config(_) | ExpError::Shape(_) => 1,
            ExpError::Run { source, .. } | ExpError::Core(source) => core_exit_code(source),
            ExpError::AuditFailed(_) => 2,
            ExpError::Io { .. } | ExpError::Parse { .. } | ExpError::Interrupted(_) => 3,
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        _ if e.is_numeric() => 2,
        CoreError::Io(_) | CoreError::Csv { .. } | CoreError::Checkpoint { .. } => 3,
        _ => 1,
    }
}
