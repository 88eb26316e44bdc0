use std::path::Path;

use windadj_core::{Error as CoreError, ErrorKind};

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{location}: {message}")]
    Data { location: String, message: String },
    #[error("{context}: {source}")]
    Core { context: String, source: CoreError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data { .. } | CliError::Io { .. } => 3,
            CliError::Core { source, .. } => match source.kind() {
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }

    pub fn data(location: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Data { location: location.into(), message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

/// Attaches a description of the failing step to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for Result<T, CoreError> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}
