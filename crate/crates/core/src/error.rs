use std::path::PathBuf;

use mlfd_numerics::NumericsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("unknown level '{0}' for this model")]
    UnknownLevel(String),

    #[error("no head for dataset index {0}")]
    HeadRouting(usize),

    #[error("incomplete fusion input: {0}")]
    IncompleteInput(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Process exit-code classes used by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Precondition,
    Numeric,
    Data,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::UnknownLevel(_) | Error::HeadRouting(_) => ErrorClass::Config,
            Error::Precondition(_) | Error::StaleCache(_) | Error::IncompleteInput(_) => ErrorClass::Precondition,
            Error::Numerics(NumericsError::Io(_)) | Error::Io { .. } => ErrorClass::Io,
            Error::Numerics(NumericsError::Format(_) | NumericsError::Corrupt(_)) => ErrorClass::Data,
            Error::Numerics(_) => ErrorClass::Numeric,
            Error::Format(_) | Error::Corruption(_) => ErrorClass::Data,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
