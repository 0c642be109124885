use crate::params::ParameterSet;

use super::TrainerError;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub metric: f64,
    pub params: ParameterSet,
}

fn rank(metric: f64) -> f64 {
    if metric.is_nan() {
        f64::NEG_INFINITY
    } else {
        metric
    }
}

/// Index of the entry with the highest metric; the earliest wins ties.
pub fn select_best_checkpoint<P>(trace: &[(P, f64)]) -> Result<(usize, &P, f64), TrainerError> {
    let mut best: Option<usize> = None;
    for (i, (_, m)) in trace.iter().enumerate() {
        if best.is_none_or(|b| rank(*m) > rank(trace[b].1)) {
            best = Some(i);
        }
    }
    let i = best.ok_or(TrainerError::EmptyTrace)?;
    Ok((i, &trace[i].0, trace[i].1))
}

/// Streaming form of [`select_best_checkpoint`] that only clones on improvement.
#[derive(Debug, Default)]
pub struct BestCheckpoint {
    best: Option<Checkpoint>,
}

impl BestCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, epoch: u32, params: &ParameterSet, metric: f64) {
        let better = match &self.best {
            None => true,
            Some(b) => rank(metric) > rank(b.metric),
        };
        if better {
            self.best = Some(Checkpoint {
                epoch,
                metric,
                params: params.clone(),
            });
        }
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Result<Checkpoint, TrainerError> {
        self.best.ok_or(TrainerError::EmptyTrace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ModelSchema;
    use std::sync::Arc;

    #[test]
    fn argmax_with_earliest_tie() {
        let t = [("a", 0.1), ("b", 0.5), ("c", 0.3)];
        assert_eq!(select_best_checkpoint(&t).unwrap().0, 1);
        let flat = [("a", 0.2), ("b", 0.2), ("c", 0.2)];
        assert_eq!(select_best_checkpoint(&flat).unwrap().0, 0);
        let up = [("a", 0.1), ("b", 0.2), ("c", 0.3)];
        assert_eq!(*select_best_checkpoint(&up).unwrap().1, "c");
        let empty: [(&str, f64); 0] = [];
        assert!(matches!(select_best_checkpoint(&empty), Err(TrainerError::EmptyTrace)));
        let nan_first = [("a", f64::NAN), ("b", -5.0)];
        assert_eq!(select_best_checkpoint(&nan_first).unwrap().0, 1);
    }

    #[test]
    fn streaming_matches_batch() {
        let schema = Arc::new(ModelSchema::toy(2, 1, 1).unwrap());
        let metrics = [0.3, 0.7, 0.7, 0.1, 0.9, 0.9];
        let snaps: Vec<_> = metrics
            .iter()
            .enumerate()
            .map(|(i, m)| (ParameterSet::filled(Arc::clone(&schema), i as f32), *m))
            .collect();
        let mut tracker = BestCheckpoint::new();
        for (i, (p, m)) in snaps.iter().enumerate() {
            tracker.observe(i as u32, p, *m);
        }
        let (idx, p, m) = select_best_checkpoint(&snaps).unwrap();
        let best = tracker.into_best().unwrap();
        assert_eq!(best.epoch as usize, idx);
        assert_eq!(&best.params, p);
        assert_eq!(best.metric, m);
        assert_eq!(idx, 4);
    }
}
