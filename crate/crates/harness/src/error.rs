use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("config file {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("corpus {path}: {available} decodable images, {requested} requested")]
    InsufficientImages {
        path: PathBuf,
        available: usize,
        requested: usize,
    },

    #[error("records file {path} line {line}: {detail}")]
    Records { path: PathBuf, line: usize, detail: String },

    #[error("audit mismatch for {cell}: recorded {recorded}, replayed {replayed}")]
    Audit { cell: String, recorded: f64, replayed: f64 },

    #[error(transparent)]
    Core(#[from] leakmark::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigParse { .. } => 2,
            HarnessError::Core(leakmark::Error::Parameter(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
