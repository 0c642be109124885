//! Federated experiment orchestration over the wire protocol.

pub mod client;
pub mod config;
pub mod experiment;
pub mod report;
pub mod server;
pub mod setup;

use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::evaluation::EvalError;
use crate::partition::PartitionError;
use crate::schema::SchemaError;
use crate::trainer::TrainerError;
use crate::transport::TransportError;

pub use client::{client_id, run_client, ClientOutcome};
pub use config::{CheckpointMode, QUICKSTART_CONFIG, ExperimentConfig, PartitionMode, TrainerKind, Weighting};
pub use experiment::{
    evaluate_models, run_experiment, run_remote_client, run_seed, serve_seed, summarize_runs, write_artifacts,
    Carrier, ExperimentOutput, RunOptions, SeedRun,
};
pub use report::{ClientRoundStats, ClientStatus, RoundReport, SummaryLine};
pub use server::{run_server, ServerOutcome, ServerPlan};
pub use setup::{build_partition, load_schema, Experiment};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("trainer: {0}")]
    Trainer(#[from] TrainerError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{}: {source}", client.map_or("transport".to_string(), |c| format!("client {c}")))]
    Transport {
        client: Option<usize>,
        #[source]
        source: TransportError,
    },
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("client {client} failed in round {round}: {message}")]
    ClientFailed { client: usize, round: u32, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
