//! Distribution networks for open set learning.
//!
//! An embedding network maps inputs to a latent space where every class is
//! a diagonal Gaussian. Training maximizes class-balanced likelihood;
//! validation refines each Gaussian with a conjugate update and picks a
//! per-class log-likelihood threshold. At test time samples rejected by all
//! classes found new ones, and accepted samples refine their class online.
//!
//! | module | contents |
//! |---|---|
//! | [`diffnet`] | feed-forward network, backprop, Adam |
//! | [`distributions`] | class Gaussians, loss, NIW updates, registry |
//! | [`trainer`] | epochs, validation, thresholds, model selection |
//! | [`openset`] | sequential classification with novel-class creation |
//! | [`metrics`] | open-set scores and openness |
//! | [`protocol`] | multi-ordering test runs, openness sweep |
//! | [`data`] | IDX/CSV/synthetic data, splits, config, checkpoints |

pub mod data;
pub mod diffnet;
pub mod distributions;
mod error;
pub mod matrix;
pub mod metrics;
pub mod openset;
pub mod protocol;
pub mod trainer;

pub use data::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use data::config::RunConfig;
pub use data::{apply_split, synth_blobs, BlobSpec, DataError, Dataset, SplitSpec, Splits};
pub use diffnet::{Activation, AdamConfig, NetworkError, NetworkParams, NetworkSpec};
pub use distributions::{
    ClassDistribution, ClassId, CovarianceMode, DistributionError, DistributionRegistry, Origin,
    TrainableDistributions,
};
pub use error::{Error, Result, ShapeError};
pub use matrix::Matrix;
pub use metrics::{AggregateReport, EvalReport, MetricsError, Stat};
pub use openset::{detect_novel, run_stream, OpenSetSession, Prediction, StreamResult};
pub use protocol::{openness_sweep, test_protocol, ProtocolReport, SweepRow};
pub use trainer::{fit, FitOutcome, ModelCheckpoint, TrainConfig, TrainError, ValidationReport};
