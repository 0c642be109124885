//! Analytic stand-in for local training: gradient descent on
//! `loss(w) = ½‖w − t‖²` towards a client-specific optimum `t`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{mix_seed, DataRef, EpochHook, TrainOutcome, TrainRequest, Trainer, TrainerError};
use crate::params::ParameterSet;
use crate::schema::ModelSchema;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub target: ParameterSet,
    pub learning_rate: f64,
    /// Standard deviation of additive gradient noise.
    pub noise_scale: f64,
}

impl QuadraticTask {
    pub fn new(target: ParameterSet, learning_rate: f64, noise_scale: f64) -> Result<Self, TrainerError> {
        let task = Self {
            target,
            learning_rate,
            noise_scale,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<(), TrainerError> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(TrainerError::Config(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(TrainerError::Config(format!("noise scale {} must be >= 0", self.noise_scale)));
        }
        Ok(())
    }

    /// Validation metric: negative distance to the optimum.
    pub fn metric(&self, params: &ParameterSet) -> f64 {
        -params.distance(&self.target)
    }
}

pub fn toy_train(
    params: &ParameterSet,
    task: &QuadraticTask,
    epochs: u32,
    seed: u64,
) -> Result<(ParameterSet, Vec<f64>), TrainerError> {
    toy_train_with(params, task, epochs, seed, &mut |_, _, _| {})
}

/// Runs `epochs` full-gradient steps `w ← w − lr·(w − t + noise)`, reporting
/// each epoch's parameters and metric to `on_epoch`.
pub fn toy_train_with(
    params: &ParameterSet,
    task: &QuadraticTask,
    epochs: u32,
    seed: u64,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(ParameterSet, Vec<f64>), TrainerError> {
    task.validate()?;
    if params.schema() != task.target.schema() {
        return Err(crate::schema::SchemaError::Mismatch("parameters and target use different schemas".into()).into());
    }
    let lr = task.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = params.clone();
    let mut trace = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        let mut sq = 0.0f64;
        for (b, target) in task.target.blocks().iter().enumerate() {
            for (x, t) in w.block_mut(b).iter_mut().zip(target) {
                let t = f64::from(*t);
                let mut grad = f64::from(*x) - t;
                if task.noise_scale > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    grad += task.noise_scale * n;
                }
                let next = (f64::from(*x) - lr * grad) as f32;
                *x = next;
                let d = f64::from(next) - t;
                sq += d * d;
            }
        }
        let metric = -sq.sqrt();
        on_epoch(epoch, &w, metric);
        trace.push(metric);
    }
    Ok((w, trace))
}

/// One [`QuadraticTask`] per client.
#[derive(Debug, Clone)]
pub struct QuadraticTrainer {
    schema: Arc<ModelSchema>,
    tasks: Vec<QuadraticTask>,
    samples: Vec<f64>,
}

impl QuadraticTrainer {
    /// `samples` defaults to one sample per client.
    pub fn new(tasks: Vec<QuadraticTask>, samples: Option<Vec<f64>>) -> Result<Self, TrainerError> {
        let first = tasks
            .first()
            .ok_or_else(|| TrainerError::Config("at least one client task is required".into()))?;
        let schema = Arc::clone(first.target.schema());
        for t in &tasks {
            t.validate()?;
            if t.target.schema() != &schema {
                return Err(TrainerError::Config("client targets use different schemas".into()));
            }
        }
        let samples = samples.unwrap_or_else(|| vec![1.0; tasks.len()]);
        if samples.len() != tasks.len() {
            return Err(TrainerError::Config(format!(
                "{} sample counts for {} clients",
                samples.len(),
                tasks.len()
            )));
        }
        if samples.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(TrainerError::Config("sample counts must be finite and >= 0".into()));
        }
        Ok(Self { schema, tasks, samples })
    }

    /// Targets drawn uniformly from `[-scale, scale)`, seeded per client.
    pub fn with_random_targets(
        schema: Arc<ModelSchema>,
        n_clients: usize,
        learning_rate: f64,
        noise_scale: f64,
        target_seed: u64,
        target_scale: f32,
    ) -> Result<Self, TrainerError> {
        let tasks = (0..n_clients)
            .map(|c| {
                let target = ParameterSet::random(Arc::clone(&schema), mix_seed(target_seed, c as u64), target_scale);
                QuadraticTask::new(target, learning_rate, noise_scale)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(tasks, None)
    }

    pub fn with_samples(mut self, samples: Vec<f64>) -> Result<Self, TrainerError> {
        if samples.len() != self.tasks.len() {
            return Err(TrainerError::Config(format!(
                "{} sample counts for {} clients",
                samples.len(),
                self.tasks.len()
            )));
        }
        self.samples = samples;
        Ok(self)
    }

    pub fn tasks(&self) -> &[QuadraticTask] {
        &self.tasks
    }

    fn task(&self, client: usize) -> Result<&QuadraticTask, TrainerError> {
        self.tasks.get(client).ok_or(TrainerError::UnknownClient(client))
    }
}

impl Trainer for QuadraticTrainer {
    fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    fn n_clients(&self) -> usize {
        self.tasks.len()
    }

    fn train(
        &self,
        params: &ParameterSet,
        request: &TrainRequest,
        on_epoch: &mut EpochHook<'_>,
    ) -> Result<TrainOutcome, TrainerError> {
        // runs are short, so the patience hint is not used
        let task = self.task(request.client)?;
        let (params, trace) = toy_train_with(params, task, request.epochs, request.seed, on_epoch)?;
        Ok(TrainOutcome { params, trace })
    }

    fn evaluate(&self, params: &ParameterSet, data: DataRef) -> Result<f64, TrainerError> {
        Ok(self.task(data.client)?.metric(params))
    }

    fn sample_count(&self, client: usize) -> f64 {
        self.samples.get(client).copied().unwrap_or(0.0)
    }
}
