//! Federated partial aggregation for modular (backbone / neck / head)
//! detection models: communication accounting, FedAvg and FedMedian over
//! component masks, client data partitioning, mAP50 evaluation, a
//! round-based orchestrator and its wire protocol.

pub mod accounting;
pub mod aggregation;
pub mod orchestrator;
pub mod evaluation;
pub mod params;
pub mod partition;
pub mod schema;
pub mod strategy;
pub mod trainer;
pub mod transport;

pub use accounting::{comm_report, component_counts, CommReport, ComponentCounts};
pub use aggregation::{fed_avg, fed_median, merge, ClientUpdate};
pub use params::{pack, unpack, MaskedParams, ParameterSet};
pub use schema::{BlockSpec, Component, ComponentMask, ModelSchema};
pub use strategy::{AggRule, Strategy};
