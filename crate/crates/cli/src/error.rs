use std::path::PathBuf;

use qbtc_core::protocol::ProtocolError;
use thiserror::Error;

/// Every way a command can end other than success.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("coin rejected at {0} stage")]
    Rejected(String),
    #[error("mint failed: {0}")]
    Mint(ProtocolError),
    #[error("replay differs from the manifest: {0}")]
    ReplayMismatch(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Parse(_) => 3,
            CliError::Rejected(_) => 4,
            CliError::Mint(_) => 5,
            CliError::ReplayMismatch(_) => 6,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(msg) => CliError::Config(msg),
            other => CliError::Mint(other),
        }
    }
}
