use thiserror::Error;

use crate::data::checkpoint::CheckpointError;
use crate::data::idx::IdxError;
use crate::data::DataError;
use crate::diffnet::NetworkError;
use crate::distributions::DistributionError;
use crate::metrics::MetricsError;
use crate::trainer::TrainError;

/// A dimension disagreement between two values that must line up.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
pub struct ShapeError {
    pub axis: String,
    pub expected: usize,
    pub found: usize,
}

impl ShapeError {
    pub fn new(axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Self {
            axis: axis.into(),
            expected,
            found,
        }
    }
}

/// Crate-level error, wrapping the per-module errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
