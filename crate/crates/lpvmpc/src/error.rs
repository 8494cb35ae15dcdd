use std::path::PathBuf;

use lpvmpc_core::mpc::MpcError;
use lpvmpc_core::terminal::TerminalError;
use lpvmpc_core::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Reading an input file failed.
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("controller: {0}")]
    Mpc(#[from] MpcError),
    #[error("terminal: {0}")]
    Terminal(#[from] TerminalError),
    #[error("run aborted at sample {k}: {reason}")]
    Aborted { k: usize, reason: String },
}

impl Error {
    /// Exit code of the command-line tool: 2 for configuration, 3 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Read { .. } | Error::Json { .. } | Error::Config(_) => 2,
            Error::Mpc(MpcError::Config(_) | MpcError::Dimension { .. } | MpcError::MissingTerminal) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
