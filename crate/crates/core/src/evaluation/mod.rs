//! Detection metrics: IoU, greedy TP/FP matching, all-points AP and mAP50,
//! plus the in-distribution / cross-distribution evaluation matrix.

mod detections;
mod matrix;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detections::{read_detections, write_detections};
pub use matrix::{eval_matrix, mean_std, summarize, EvalMatrix, SummaryRow};

/// IoU threshold for a true positive under mAP50.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("confidence {0} is not finite")]
    BadConfidence(f64),
    #[error("missing model for client {0}")]
    MissingModel(usize),
    #[error("evaluation matrix must be square and non-empty, got {0} cells")]
    BadMatrix(usize),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trainer failed during evaluation: {0}")]
    Trainer(#[from] crate::trainer::TrainerError),
}

/// Axis-aligned box with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, EvalError> {
        let bad = |reason| EvalError::InvalidBox { x1, y1, x2, y2, reason };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(bad("requires x1 < x2 and y1 < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Like [`BBox::new`], additionally requiring coordinates in `[0, 1]`.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, EvalError> {
        let b = Self::new(x1, y1, x2, y2)?;
        if [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "coordinates must be normalized to [0, 1]",
            });
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub frame_id: u64,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, frame_id: u64) -> Self {
        Self {
            video_id: video_id.into(),
            frame_id,
        }
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.video_id, self.frame_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: FrameKey,
    pub class_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frame: FrameKey,
    pub class_id: u32,
    pub bbox: BBox,
}

/// Indices of `dets` by descending confidence; equal confidences keep input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy one-to-one matching for detections of a single class in a single frame.
///
/// Detections are visited by descending confidence. Each takes the unmatched
/// ground truth with the highest IoU (lowest index on ties) and is a true
/// positive iff that IoU reaches `threshold`. Labels are returned in input order.
pub fn match_detections(dets: &[Detection], gts: &[BBox], threshold: f64) -> Vec<bool> {
    let mut labels = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    for i in confidence_order(dets) {
        if let Some((g, overlap)) = best_unmatched(&dets[i].bbox, gts, &taken) {
            if overlap >= threshold {
                taken[g] = true;
                labels[i] = true;
            }
        }
    }
    labels
}

fn best_unmatched(bbox: &BBox, gts: &[BBox], taken: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] {
            continue;
        }
        let v = iou(bbox, gt);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best
}

/// All-points interpolated AP for confidence-sorted TP/FP labels.
///
/// Returns `None` when the class has neither ground truth nor detections,
/// and `Some(0.0)` when it has detections but no ground truth.
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return (!labels.is_empty()).then_some(0.0);
    }
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &is_tp) in labels.iter().enumerate() {
        tp += usize::from(is_tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // monotone non-increasing envelope
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / n_gt as f64;
    let ap = labels
        .iter()
        .zip(&precision)
        .filter(|(is_tp, _)| **is_tp)
        .map(|(_, p)| p * step)
        .sum::<f64>();
    Some(ap.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    /// AP per class that has ground truth or detections.
    pub per_class: BTreeMap<u32, f64>,
    /// Mean AP over classes present in the ground truth (0 when there are none).
    pub map: f64,
}

/// mAP at IoU 0.5 over any number of frames and classes.
pub fn map50(dets: &[Detection], gts: &[GroundTruth]) -> MapResult {
    map_at(dets, gts, IOU_THRESHOLD)
}

pub fn map_at(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> MapResult {
    let mut gt_by_cell: HashMap<(u32, &FrameKey), Vec<BBox>> = HashMap::new();
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    for g in gts {
        gt_by_cell.entry((g.class_id, &g.frame)).or_default().push(g.bbox);
        *gt_count.entry(g.class_id).or_default() += 1;
    }
    let mut det_by_class: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        det_by_class.entry(d.class_id).or_default().push(d.clone());
    }

    let mut per_class = BTreeMap::new();
    let classes: std::collections::BTreeSet<u32> =
        gt_count.keys().chain(det_by_class.keys()).copied().collect();
    for class in classes {
        let class_dets = det_by_class.remove(&class).unwrap_or_default();
        let mut taken: HashMap<&FrameKey, Vec<bool>> = HashMap::new();
        let mut labels = Vec::with_capacity(class_dets.len());
        for i in confidence_order(&class_dets) {
            let d = &class_dets[i];
            let is_tp = match gt_by_cell.get(&(class, &d.frame)) {
                Some(cell) => {
                    let used = taken.entry(&d.frame).or_insert_with(|| vec![false; cell.len()]);
                    match best_unmatched(&d.bbox, cell, used) {
                        Some((g, overlap)) if overlap >= threshold => {
                            used[g] = true;
                            true
                        }
                        _ => false,
                    }
                }
                None => false,
            };
            labels.push(is_tp);
        }
        let n_gt = gt_count.get(&class).copied().unwrap_or(0);
        if let Some(ap) = average_precision(&labels, n_gt) {
            per_class.insert(class, ap);
        }
    }

    let present: Vec<f64> = gt_count.keys().map(|c| per_class[c]).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapResult { per_class, map }
}
