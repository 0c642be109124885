use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::config::{ExperimentConfig, PartitionConfig, PartitionMode, TrainerKind};
use super::OrchestratorError;
use crate::params::ParameterSet;
use crate::partition::{
    apply_lmo, curation_groups, holdout, partition_by_group, partition_by_length, partition_iid, with_eval_splits,
    DatasetManifest, PartitionSpec,
};
use crate::schema::ModelSchema;
use crate::trainer::{mix_seed, MockDetector, MockDetectorConfig, QuadraticTrainer, Trainer};
use crate::transport::RoundConfig;

const INIT_SALT: u64 = 0x1417;

/// `toy`, `yolov11n`, or a schema file path.
pub fn load_schema(spec: &str, toy: [usize; 3]) -> Result<ModelSchema, OrchestratorError> {
    Ok(match spec {
        "toy" => ModelSchema::toy(toy[0], toy[1], toy[2])?,
        "yolov11n" => ModelSchema::yolov11n(),
        path => ModelSchema::load(path)?,
    })
}

/// Loads the manifest and builds (or loads) the client partition.
pub fn build_partition(
    cfg: &PartitionConfig,
    n_clients: usize,
) -> Result<(DatasetManifest, PartitionSpec), OrchestratorError> {
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let spec = match &cfg.spec {
        Some(path) => PartitionSpec::load(path)?,
        None => {
            let (pool, eval) = holdout(&manifest, n_clients, cfg.valid_per_client, cfg.test_per_client, cfg.seed)?;
            let train = match cfg.mode {
                PartitionMode::Iid => partition_iid(&pool, n_clients, cfg.seed)?,
                PartitionMode::Length => partition_by_length(&pool, n_clients)?,
                PartitionMode::Group => {
                    let prefix = cfg.group_prefix.as_deref().ok_or_else(|| {
                        OrchestratorError::Config("partition.mode = \"group\" needs partition.group_prefix".into())
                    })?;
                    partition_by_group(&pool, &curation_groups(&pool, prefix, n_clients)?)?
                }
            };
            let lmo: BTreeMap<_, _> = cfg.lmo.iter().map(|e| (e.client, e.classes.clone())).collect();
            apply_lmo(&with_eval_splits(&train, &eval)?, &lmo)?
        }
    };
    if spec.n_clients() != n_clients {
        return Err(OrchestratorError::Config(format!(
            "partition has {} clients, config says n_clients = {n_clients}",
            spec.n_clients()
        )));
    }
    spec.validate(&manifest)?;
    Ok((manifest, spec))
}

/// A resolved experiment: config, model schema and trainer.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schema: Arc<ModelSchema>,
    pub trainer: Arc<dyn Trainer>,
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let schema = load_schema(&config.model.schema, config.model.toy)?.into_shared();
        let t = &config.trainer;
        let trainer: Arc<dyn Trainer> = match t.kind {
            TrainerKind::Quadratic => {
                let q = QuadraticTrainer::with_random_targets(
                    Arc::clone(&schema),
                    config.n_clients,
                    t.learning_rate,
                    t.noise_scale,
                    t.target_seed,
                    t.target_scale,
                )?;
                Arc::new(match &t.samples {
                    Some(s) => q.with_samples(s.clone())?,
                    None => q,
                })
            }
            TrainerKind::MockDetector => {
                let part = config
                    .partition
                    .as_ref()
                    .ok_or_else(|| OrchestratorError::Config("mock_detector needs [partition]".into()))?;
                let (manifest, spec) = build_partition(part, config.n_clients)?;
                let mock = MockDetectorConfig {
                    learning_rate: t.learning_rate,
                    jitter: t.jitter,
                    conf_threshold: t.conf_threshold,
                };
                Arc::new(MockDetector::with_random_targets(
                    Arc::clone(&schema),
                    &manifest,
                    &spec,
                    mock,
                    t.target_seed,
                    t.target_scale,
                )?)
            }
        };
        Self::with_trainer(config, trainer)
    }

    /// Uses a caller-supplied trainer, e.g. one wrapping a real detector.
    pub fn with_trainer(config: ExperimentConfig, trainer: Arc<dyn Trainer>) -> Result<Self, OrchestratorError> {
        config.validate()?;
        if trainer.n_clients() != config.n_clients {
            return Err(OrchestratorError::Config(format!(
                "trainer serves {} clients, config says n_clients = {}",
                trainer.n_clients(),
                config.n_clients
            )));
        }
        Ok(Self {
            schema: Arc::clone(trainer.schema()),
            config,
            trainer,
        })
    }

    pub fn round_config(&self, seed: u64) -> RoundConfig {
        let c = &self.config;
        RoundConfig {
            rounds: c.rounds,
            local_epochs: c.local_epochs,
            batch_size: c.batch_size,
            patience: c.early_stopping_patience,
            seed,
            strategy: c.strategy,
            skip_final: c.skip_final_aggregation,
        }
    }

    /// Seeded initial model shared by every client.
    pub fn initial_model(&self, seed: u64) -> ParameterSet {
        ParameterSet::random(
            Arc::clone(&self.schema),
            mix_seed(seed, INIT_SALT),
            self.config.trainer.init_scale,
        )
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_secs(self.config.round_timeout_secs)
    }
}
