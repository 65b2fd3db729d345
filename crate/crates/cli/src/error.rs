use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: unknown keys: {}", keys.join(", "))]
    UnknownKeys { path: PathBuf, keys: Vec<String> },

    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("missing {artifact} in {dir}; run `openset {command}` first")]
    MissingArtifact { artifact: String, dir: PathBuf, command: &'static str },

    #[error("{artifact} is stale: {reason}; re-run `openset {command}`")]
    Stale { artifact: &'static str, reason: String, command: &'static str },

    #[error(transparent)]
    Core(#[from] openset_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::UnknownKeys { .. } | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}
