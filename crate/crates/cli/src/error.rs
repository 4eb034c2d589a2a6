use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line pipeline, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: spectral_dmri::Error,
    },
    #[error("numeric failure in stage `{stage}`: {message}")]
    Numeric { stage: &'static str, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, source: impl Into<spectral_dmri::Error>) -> Self {
        CliError::Stage {
            stage,
            source: source.into(),
        }
    }

    /// 2 for configuration or input problems, 3 for numeric failures, 4 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Format { .. } => 2,
            CliError::Numeric { .. } => 3,
            CliError::Io { .. } => 4,
            CliError::Stage { source, .. } => {
                if source.is_io_error() {
                    4
                } else if source.is_input_error() {
                    2
                } else {
                    3
                }
            }
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
