use std::path::PathBuf;

use vtp_core::bpe::BpeError;
use vtp_core::corpus_stats::StatsError;
use vtp_core::model_io::IoError;
use vtp_core::toy_mlm::experiment::ExperimentError;
use vtp_core::toy_mlm::ModelError;
use vtp_core::vocab_transfer::TransferError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DOMAIN: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Domain(_) => EXIT_DOMAIN,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<BpeError> for CliError {
    fn from(e: BpeError) -> Self {
        match e {
            BpeError::File { path, source } => CliError::Io { path, source },
            BpeError::Io { offset, source } => CliError::Io {
                path: PathBuf::from(format!("<stream offset {offset}>")),
                source,
            },
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { path, source } => CliError::Io { path, source },
            IoError::Vocab(v) => v.into(),
            other => CliError::Domain(format!("{other} [{}]", other.code())),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Io { path, source } => CliError::Io { path, source },
            StatsError::UnknownFormat(_) => CliError::Usage(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Bpe(b) => b.into(),
            ExperimentError::InvalidConfig(m) => CliError::Usage(format!("invalid experiment config: {m}")),
            other => CliError::Domain(other.to_string()),
        }
    }
}
