//! Experiment configuration (TOML). Relative paths resolve against the
//! directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::strategy::Strategy;

/// The bundled quickstart experiment (3 clients, quadratic task, 5 rounds).
pub const QUICKSTART_CONFIG: &str = include_str!("../../fixtures/quickstart.cfg");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    SampleCount,
    Uniform,
}

/// How the aggregated model is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Every client submits its own best-validation checkpoint.
    #[default]
    #[serde(alias = "per-client")]
    PerClient,
    /// The server takes the masked parameters of the single client with the
    /// best validation metric instead of aggregating.
    #[serde(alias = "single-best-client")]
    SingleBestClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Quadratic,
    MockDetector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Group,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `toy`, `yolov11n`, or a path to a schema file.
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default = "default_toy")]
    pub toy: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schema: default_schema(),
            toy: default_toy(),
        }
    }
}

fn default_schema() -> String {
    "toy".into()
}

fn default_toy() -> [usize; 3] {
    [8, 4, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub kind: TrainerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Gradient noise of the quadratic task.
    #[serde(default)]
    pub noise_scale: f64,
    /// Box jitter of the mock detector.
    #[serde(default = "one")]
    pub jitter: f64,
    #[serde(default)]
    pub conf_threshold: f64,
    #[serde(default)]
    pub target_seed: u64,
    #[serde(default = "one_f32")]
    pub target_scale: f32,
    /// Scale of the seeded initial model broadcast before round 1.
    #[serde(default = "one_f32")]
    pub init_scale: f32,
    /// Per-client sample counts for the quadratic task (FedAvg weights).
    #[serde(default)]
    pub samples: Option<Vec<f64>>,
}

fn default_lr() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

fn one_f32() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmoEntry {
    pub client: usize,
    pub classes: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub manifest: PathBuf,
    /// A saved partition spec; when set, `mode` and the holdout keys are ignored.
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: PartitionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub group_prefix: Option<String>,
    #[serde(default = "one_usize")]
    pub valid_per_client: usize,
    #[serde(default = "one_usize")]
    pub test_per_client: usize,
    #[serde(default)]
    pub lmo: Vec<LmoEntry>,
}

fn default_mode() -> PartitionMode {
    PartitionMode::Iid
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: u32,
    pub strategy: Strategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub n_clients: usize,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub best_checkpoint: CheckpointMode,
    #[serde(default = "yes")]
    pub skip_final_aggregation: bool,
    #[serde(default)]
    pub tolerate_client_failure: bool,
    #[serde(default)]
    pub early_stopping_patience: Option<u32>,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub partition: Option<PartitionConfig>,
}

fn default_batch() -> u32 {
    8
}

fn default_seeds() -> Vec<u64> {
    vec![12, 345, 678]
}

fn yes() -> bool {
    true
}

fn default_timeout() -> u64 {
    600
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, OrchestratorError> {
        let de = toml::Deserializer::parse(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            OrchestratorError::Config(format!("at `{path}`: {}", e.into_inner().message().trim_end()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config and makes its relative paths absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut config =
            Self::parse(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(part) = &mut self.partition {
            fix(&mut part.manifest);
            if let Some(spec) = &mut part.spec {
                fix(spec);
            }
        }
        let s = &self.model.schema;
        if !matches!(s.as_str(), "toy" | "yolov11n") && Path::new(s).is_relative() {
            self.model.schema = base.join(s).display().to_string();
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.round_timeout_secs == 0 {
            return bad("round_timeout_secs must be >= 1".into());
        }
        if let Some(s) = &self.trainer.samples {
            if s.len() != self.n_clients {
                return bad(format!("trainer.samples has {} entries for {} clients", s.len(), self.n_clients));
            }
        }
        match (self.trainer.kind, &self.partition) {
            (TrainerKind::MockDetector, None) => bad("trainer.kind = \"mock_detector\" needs a [partition] section".into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::AggRule;

    const MINIMAL: &str = r#"
rounds = 3
local_epochs = 2
strategy = "FedBackboneNeck:median"
n_clients = 3

[trainer]
kind = "quadratic"
"#;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.strategy.rule, AggRule::Median);
        assert_eq!(c.seeds, vec![12, 345, 678]);
        assert_eq!(c.batch_size, 8);
        assert!(c.skip_final_aggregation);
        assert_eq!(c.weighting, Weighting::SampleCount);
        assert_eq!(c.best_checkpoint, CheckpointMode::PerClient);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let typo = MINIMAL.replace("kind", "knd");
        let e = ExperimentConfig::parse(&typo).unwrap_err().to_string();
        assert!(e.contains("trainer"), "{e}");
        let strat = MINIMAL.replace("FedBackboneNeck:median", "FedTail");
        let e = ExperimentConfig::parse(&strat).unwrap_err().to_string();
        assert!(e.contains("strategy"), "{e}");
        let zero = MINIMAL.replace("rounds = 3", "rounds = 0");
        assert!(ExperimentConfig::parse(&zero).is_err());
        let weighting = format!("weighting = \"uniform\"\nbest_checkpoint = \"single-best-client\"\n{MINIMAL}");
        let c = ExperimentConfig::parse(&weighting).unwrap();
        assert_eq!(c.weighting, Weighting::Uniform);
        assert_eq!(c.best_checkpoint, CheckpointMode::SingleBestClient);
    }
}
