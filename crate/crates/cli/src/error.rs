use std::path::PathBuf;

use lmn_core::LmnError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] LmnError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("manifest {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },
    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T, CliError>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Io {
            path: path.into(),
            source,
        })
    }
}
