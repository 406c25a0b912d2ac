use std::path::PathBuf;

use qshield_core::client::ClientError;
use qshield_core::crypto::SharingError;
use qshield_core::enclave::CoreError;
use qshield_core::host::HostError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed {what}")]
    Format { path: PathBuf, what: &'static str },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
