use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("output directory {path} is not writable: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run failed for seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: sscl_core::Error,
    },

    #[error(transparent)]
    Core(#[from] sscl_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for everything
    /// that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigRead { .. } | HarnessError::ConfigParse { .. } => 1,
            HarnessError::Core(sscl_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
