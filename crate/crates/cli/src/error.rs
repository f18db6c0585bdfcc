use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing {missing}: run `{requires}` first")]
    Dependency { requires: String, missing: PathBuf },

    #[error(transparent)]
    Core(#[from] blockdiff::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        CliError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dependency { .. } => "dependency",
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Csv { .. } => "csv",
            CliError::Artifact { .. } => "artifact",
        }
    }

    /// Machine-readable record written to stderr on failure.
    pub fn record(&self, command: &str) -> ErrorRecord {
        ErrorRecord {
            command: command.to_string(),
            kind: self.kind(),
            message: self.to_string(),
            requires: match self {
                CliError::Dependency { requires, .. } => Some(requires.clone()),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub command: String,
    pub kind: &'static str,
    pub message: String,
    pub requires: Option<String>,
}
