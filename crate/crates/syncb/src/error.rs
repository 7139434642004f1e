use std::process::ExitCode;

use thiserror::Error;

/// Failure classes of the command-line tool, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Data(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn data(err: impl Into<anyhow::Error>) -> Self {
        Self::Data(err.into())
    }

    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        Self::Runtime(err.into())
    }
}

/// Core usage errors stay usage errors; everything else the core reports is
/// about the data or configuration.
impl From<syncb_core::Error> for CliError {
    fn from(err: syncb_core::Error) -> Self {
        match err {
            syncb_core::Error::Usage(msg) => Self::Usage(msg),
            other => Self::Data(other.into()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach context to errors of a given class.
pub trait Classify<T> {
    fn data_err(self, context: impl FnOnce() -> String) -> CliResult<T>;
    fn runtime_err(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data_err(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Data(e.into().context(context())))
    }

    fn runtime_err(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into().context(context())))
    }
}
