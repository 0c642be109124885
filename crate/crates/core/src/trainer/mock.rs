//! Scripted detector that drives the evaluation pipeline without a network.
//!
//! Detections are the ground-truth boxes of a frame, each shifted along both
//! axes by `s·width` and `s·height` in a random direction, where
//! `s = m·(0.5 + u)`, `u ~ U[0, 1)` and the magnitude `m` is `jitter` times
//! the RMS distance between the model and the evaluated client's optimum.
//! Training pulls the parameters towards the client's own optimum.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{mix_seed, DataRef, EpochHook, Split, TrainOutcome, TrainRequest, Trainer, TrainerError};
use crate::evaluation::{map50, Detection, GroundTruth};
use crate::params::ParameterSet;
use crate::partition::{client_frames, DatasetManifest, FrameRecord, PartitionSpec};
use crate::schema::ModelSchema;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockDetectorConfig {
    pub learning_rate: f64,
    pub jitter: f64,
    /// Detections below this confidence are dropped.
    pub conf_threshold: f64,
}

impl Default for MockDetectorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            jitter: 1.0,
            conf_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockDetector {
    schema: Arc<ModelSchema>,
    targets: Vec<ParameterSet>,
    /// `frames[client][split]`
    frames: Vec<[Vec<FrameRecord>; 3]>,
    config: MockDetectorConfig,
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

impl MockDetector {
    pub fn new(
        targets: Vec<ParameterSet>,
        manifest: &DatasetManifest,
        spec: &PartitionSpec,
        config: MockDetectorConfig,
    ) -> Result<Self, TrainerError> {
        if !(config.learning_rate > 0.0 && config.learning_rate <= 1.0) {
            return Err(TrainerError::Config(format!(
                "learning rate {} outside (0, 1]",
                config.learning_rate
            )));
        }
        if !(config.jitter >= 0.0 && config.jitter.is_finite()) {
            return Err(TrainerError::Config(format!("jitter {} must be >= 0", config.jitter)));
        }
        if targets.len() != spec.n_clients() {
            return Err(TrainerError::Config(format!(
                "{} targets for {} partition clients",
                targets.len(),
                spec.n_clients()
            )));
        }
        let schema = Arc::clone(
            targets
                .first()
                .ok_or_else(|| TrainerError::Config("at least one client is required".into()))?
                .schema(),
        );
        spec.validate(manifest)
            .map_err(|e| TrainerError::Config(format!("partition does not match manifest: {e}")))?;
        let frames = (0..spec.n_clients())
            .map(|c| {
                let get = |s| client_frames(manifest, spec, c, s).map_err(|e| TrainerError::Config(e.to_string()));
                Ok([get(Split::Train)?, get(Split::Valid)?, get(Split::Test)?])
            })
            .collect::<Result<Vec<_>, TrainerError>>()?;
        Ok(Self {
            schema,
            targets,
            frames,
            config,
        })
    }

    pub fn with_random_targets(
        schema: Arc<ModelSchema>,
        manifest: &DatasetManifest,
        spec: &PartitionSpec,
        config: MockDetectorConfig,
        target_seed: u64,
        target_scale: f32,
    ) -> Result<Self, TrainerError> {
        let targets = (0..spec.n_clients())
            .map(|c| ParameterSet::random(Arc::clone(&schema), mix_seed(target_seed, c as u64), target_scale))
            .collect();
        Self::new(targets, manifest, spec, config)
    }

    pub fn frames(&self, data: DataRef) -> Result<&[FrameRecord], TrainerError> {
        self.frames
            .get(data.client)
            .map(|f| f[split_slot(data.split)].as_slice())
            .ok_or(TrainerError::UnknownClient(data.client))
    }

    /// Jitter magnitude of `params` on `client`'s data.
    pub fn magnitude(&self, params: &ParameterSet, client: usize) -> Result<f64, TrainerError> {
        let target = self.targets.get(client).ok_or(TrainerError::UnknownClient(client))?;
        let n = params.schema().total_len() as f64;
        Ok(self.config.jitter * params.distance(target) / n.sqrt())
    }

    /// Detections for every frame of the split, in frame order.
    pub fn detect(&self, params: &ParameterSet, data: DataRef) -> Result<Vec<Vec<Detection>>, TrainerError> {
        let magnitude = self.magnitude(params, data.client)?;
        let digest = params_digest(params);
        Ok(self
            .frames(data)?
            .iter()
            .map(|f| perturb_frame(f, magnitude, frame_seed(&digest, f), self.config.conf_threshold))
            .collect())
    }
}

fn params_digest(params: &ParameterSet) -> [u8; 32] {
    let mut h = Sha256::new();
    for block in params.blocks() {
        for v in block {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn frame_seed(digest: &[u8; 32], frame: &FrameRecord) -> u64 {
    let mut h = Sha256::new();
    h.update(digest);
    h.update(frame.video_id.as_bytes());
    h.update([0u8]);
    h.update(frame.frame_id.to_le_bytes());
    let out: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Shifted copies of a frame's ground-truth boxes (see the module docs).
pub fn perturb_frame(frame: &FrameRecord, magnitude: f64, seed: u64, conf_threshold: f64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frame.annotations.len());
    for a in &frame.annotations {
        let scale = magnitude * (0.5 + rng.random::<f64>());
        let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let confidence = 1.0 - 0.5 * rng.random::<f64>();
        if confidence < conf_threshold {
            continue;
        }
        out.push(Detection {
            frame: frame.key(),
            class_id: a.class_id,
            bbox: a.bbox.translate(sx * scale * a.bbox.width(), sy * scale * a.bbox.height()),
            confidence,
        });
    }
    out
}

impl Trainer for MockDetector {
    fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    fn n_clients(&self) -> usize {
        self.targets.len()
    }

    fn train(
        &self,
        params: &ParameterSet,
        request: &TrainRequest,
        on_epoch: &mut EpochHook<'_>,
    ) -> Result<TrainOutcome, TrainerError> {
        let target = self
            .targets
            .get(request.client)
            .ok_or(TrainerError::UnknownClient(request.client))?;
        let lr = self.config.learning_rate;
        let mut w = params.clone();
        let mut trace = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0u32;
        for epoch in 0..request.epochs {
            for (b, t) in target.blocks().iter().enumerate() {
                for (x, t) in w.block_mut(b).iter_mut().zip(t) {
                    *x = (f64::from(*x) - lr * (f64::from(*x) - f64::from(*t))) as f32;
                }
            }
            let metric = self.evaluate(&w, DataRef::new(request.client, Split::Valid))?;
            on_epoch(epoch, &w, metric);
            trace.push(metric);
            if metric > best {
                best = metric;
                stale = 0;
            } else {
                stale += 1;
                if request.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
        Ok(TrainOutcome { params: w, trace })
    }

    fn evaluate(&self, params: &ParameterSet, data: DataRef) -> Result<f64, TrainerError> {
        let dets: Vec<Detection> = self.detect(params, data)?.into_iter().flatten().collect();
        let gts: Vec<GroundTruth> = self.frames(data)?.iter().flat_map(FrameRecord::ground_truths).collect();
        Ok(map50(&dets, &gts).map)
    }

    fn sample_count(&self, client: usize) -> f64 {
        self.frames.get(client).map_or(0.0, |f| f[0].len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{iou, BBox};
    use crate::partition::{partition_iid, with_eval_splits, Annotation, EvalAssignment};

    fn setup(config: MockDetectorConfig) -> (MockDetector, ParameterSet) {
        let mut frames = Vec::new();
        for v in 0..6 {
            for f in 0..3u64 {
                let x = 0.1 + 0.1 * f as f64;
                frames.push(FrameRecord {
                    video_id: format!("vid{v}"),
                    frame_id: f,
                    source_tag: "synthetic".into(),
                    annotations: vec![
                        Annotation { class_id: 0, bbox: BBox::normalized(x, 0.1, x + 0.1, 0.3).unwrap() },
                        Annotation { class_id: 1, bbox: BBox::normalized(0.5, x, 0.6, x + 0.2).unwrap() },
                    ],
                });
            }
        }
        let m = DatasetManifest::new(frames, vec!["grasper".into(), "hook".into()]).unwrap();
        let spec = partition_iid(&m.subset(&["vid0".into(), "vid1".into(), "vid2".into(), "vid3".into()]), 2, 0).unwrap();
        let spec = with_eval_splits(
            &spec,
            &[
                EvalAssignment { valid: vec!["vid4".into()], test: vec!["vid5".into()] },
                EvalAssignment { valid: vec!["vid5".into()], test: vec!["vid4".into()] },
            ],
        )
        .unwrap();
        let schema = Arc::new(ModelSchema::toy(4, 2, 2).unwrap());
        let target = ParameterSet::filled(Arc::clone(&schema), 0.5);
        let det = MockDetector::new(vec![target.clone(), target.clone()], &m, &spec, config).unwrap();
        (det, target)
    }

    #[test]
    fn perfect_model_scores_one() {
        let (det, target) = setup(MockDetectorConfig::default());
        assert_eq!(det.evaluate(&target, DataRef::new(0, Split::Test)).unwrap(), 1.0);
        let zero_jitter = setup(MockDetectorConfig { jitter: 0.0, ..Default::default() }).0;
        let far = ParameterSet::filled(Arc::clone(det.schema()), 9.0);
        assert_eq!(zero_jitter.evaluate(&far, DataRef::new(1, Split::Test)).unwrap(), 1.0);
    }

    #[test]
    fn threshold_above_one_drops_everything() {
        let (det, target) = setup(MockDetectorConfig { conf_threshold: 1.1, ..Default::default() });
        let dets = det.detect(&target, DataRef::new(0, Split::Valid)).unwrap();
        assert!(dets.iter().all(Vec::is_empty));
        assert_eq!(det.evaluate(&target, DataRef::new(0, Split::Valid)).unwrap(), 0.0);
    }

    #[test]
    fn large_shift_misses_every_box() {
        let frame = FrameRecord {
            video_id: "v".into(),
            frame_id: 0,
            source_tag: "s".into(),
            annotations: vec![Annotation { class_id: 0, bbox: BBox::normalized(0.4, 0.4, 0.5, 0.6).unwrap() }],
        };
        for seed in 0..200 {
            // m = 2.1 gives s >= 1.05, i.e. a shift larger than the box itself
            let dets = perturb_frame(&frame, 2.1, seed, 0.0);
            assert!(iou(&dets[0].bbox, &frame.annotations[0].bbox) < 0.5);
        }
    }

    #[test]
    fn detections_are_deterministic() {
        let (det, target) = setup(MockDetectorConfig::default());
        let off = ParameterSet::filled(Arc::clone(&target.schema().clone()), 0.6);
        let a = det.detect(&off, DataRef::new(0, Split::Test)).unwrap();
        let b = det.detect(&off, DataRef::new(0, Split::Test)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_improves_and_honors_patience() {
        let (det, target) = setup(MockDetectorConfig { jitter: 3.0, ..Default::default() });
        let start = ParameterSet::filled(Arc::clone(target.schema()), 2.0);
        let req = TrainRequest { client: 0, epochs: 12, batch_size: 8, seed: 0, patience: None };
        let out = det.train(&start, &req, &mut |_, _, _| {}).unwrap();
        assert_eq!(out.trace.len(), 12);
        assert!(out.trace.last().unwrap() >= out.trace.first().unwrap());
        let patient = TrainRequest { patience: Some(1), ..req };
        let short = det.train(&target, &patient, &mut |_, _, _| {}).unwrap();
        // already optimal: the second epoch cannot improve, so training stops
        assert_eq!(short.trace.len(), 2);
        assert_eq!(det.sample_count(0), 6.0);
    }
}
