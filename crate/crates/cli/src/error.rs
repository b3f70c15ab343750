use std::path::Path;

use lfr_core::error::Error as CoreError;
use thiserror::Error;

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("{0}")]
    Runtime(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Core(e) => match e {
                CoreError::Config(_) | CoreError::UnknownParam(_) | CoreError::Missing(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            },
            Self::Stage { source, .. } => source.exit_code(),
            Self::Io { .. } | Self::Format { .. } | Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Labels errors with the pipeline stage that raised them.
pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Into<CliError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| CliError::Stage {
            stage: name.to_string(),
            source: Box::new(e.into()),
        })
    }
}
