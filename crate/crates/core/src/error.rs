use std::path::PathBuf;

use thiserror::Error;
use wmlab_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("non-finite loss at step {step} (phase {phase}, alpha {alpha}): {detail}")]
    NonFiniteLoss {
        step: usize,
        phase: usize,
        alpha: usize,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err};
