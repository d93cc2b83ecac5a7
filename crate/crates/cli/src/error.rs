use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or inconsistent configuration or record.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] loopdet_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for schema errors, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema(_) => 2,
            Self::Io { .. } => 4,
            Self::Core(loopdet_core::Error::Io(_)) => 4,
            // Core validation rejects parameter values taken from the config.
            Self::Core(_) => 2,
        }
    }
}
