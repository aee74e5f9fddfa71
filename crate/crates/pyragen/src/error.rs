use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pyragen_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("PNG: {0}")]
    Png(String),
    #[error("corrupted archive: {0}")]
    Corrupt(String),
    #[error("unsupported archive version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
