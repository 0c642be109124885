//! Local-training contract fulfilled by every client, with two built-in
//! implementations: an analytic quadratic task and a scripted mock detector.

mod checkpoint;
mod mock;
mod quadratic;

use std::sync::Arc;

use thiserror::Error;

use crate::params::ParameterSet;
use crate::schema::{ModelSchema, SchemaError};

pub use checkpoint::{select_best_checkpoint, BestCheckpoint, Checkpoint};
pub use mock::{perturb_frame, MockDetector, MockDetectorConfig};
pub use quadratic::{toy_train, toy_train_with, QuadraticTask, QuadraticTrainer};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("unknown client index {0}")]
    UnknownClient(usize),
    #[error("checkpoint trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("training failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Handle naming one client's data split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataRef {
    pub client: usize,
    pub split: Split,
}

impl DataRef {
    pub fn new(client: usize, split: Split) -> Self {
        Self { client, split }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub client: usize,
    pub epochs: u32,
    pub batch_size: u32,
    pub seed: u64,
    /// Early-stopping patience in epochs; trainers may ignore it.
    pub patience: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    /// Validation metric after each completed epoch.
    pub trace: Vec<f64>,
}

/// Called after each local epoch with (epoch index, parameters, validation metric).
pub type EpochHook<'a> = dyn FnMut(u32, &ParameterSet, f64) + 'a;

/// Local training and evaluation for every client of an experiment.
///
/// Implementations must be deterministic in their inputs and free of hidden
/// mutable state, so distinct clients can train concurrently through `&self`.
/// Validation metrics follow "higher is better".
pub trait Trainer: Send + Sync {
    fn schema(&self) -> &Arc<ModelSchema>;

    fn n_clients(&self) -> usize;

    fn train(
        &self,
        params: &ParameterSet,
        request: &TrainRequest,
        on_epoch: &mut EpochHook<'_>,
    ) -> Result<TrainOutcome, TrainerError>;

    fn evaluate(&self, params: &ParameterSet, data: DataRef) -> Result<f64, TrainerError>;

    /// Training-set size used as the FedAvg weight.
    fn sample_count(&self, client: usize) -> f64;
}

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
