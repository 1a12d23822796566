use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("every replicate failed")]
    AllReplicatesFailed,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] bchmm_core::Error),

    #[error("serialization: {0}")]
    Serialize(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage or configuration, 2 data, 3 all
    /// replicates failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::AllReplicatesFailed => 3,
            Self::Parse { .. } | Self::Data(_) | Self::Io { .. } | Self::Model(_) | Self::Serialize(_) => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
