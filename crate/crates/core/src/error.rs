use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: term `{term}` is not finite")]
    Divergence { step: usize, term: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ReidError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config { key: key.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 data, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::ConfigParse(_) => 2,
            Self::Data(_) | Self::Io { .. } | Self::Checkpoint(_) => 3,
            Self::Divergence { .. } => 4,
            Self::Shape(_) | Self::InvalidArgument(_) => 1,
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "divergence",
            _ => "runtime",
        }
    }
}

pub type Result<T, E = ReidError> = std::result::Result<T, E>;
