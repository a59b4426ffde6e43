use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
        dump: Box<crate::train::DivergenceDump>,
    },
    #[error(transparent)]
    Core(#[from] lsdml_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("serializing config: {0}")]
    TomlOut(#[from] toml::ser::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for numeric
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigParse { .. } => 2,
            HarnessError::Divergence { .. }
            | HarnessError::Core(lsdml_core::Error::Divergence(_)) => 3,
            _ => 1,
        }
    }
}
