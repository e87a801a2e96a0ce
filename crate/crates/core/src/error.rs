use crate::config::ConfigError;
use crate::data::DataError;
use crate::metrics::MetricError;
use crate::numerics::{CheckpointError, NumericsError};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PaagError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite {what} at epoch {epoch}, step {step}; batch dumped to {dump:?}")]
    NonFinite { what: &'static str, epoch: usize, step: usize, dump: Option<PathBuf> },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, PaagError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| PaagError::Io { path: path.into(), source })
    }
}
