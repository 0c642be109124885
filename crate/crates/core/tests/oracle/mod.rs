//! Independent reference implementations and randomized case generators,
//! shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use fedpa::aggregation::{fed_avg, fed_median, merge, ClientUpdate};
use fedpa::evaluation::{map50, BBox, Detection, FrameKey, GroundTruth};
use fedpa::params::ParameterSet;
use fedpa::partition::{
    apply_lmo, client_frames, curation_groups, partition_by_group, partition_by_length, partition_iid,
    synthetic_manifest, DatasetManifest, PartitionSpec,
};
use fedpa::schema::{BlockSpec, Component, ComponentMask, ModelSchema};
use fedpa::trainer::Split;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

// ---------------------------------------------------------------- aggregation

#[derive(Debug, Clone)]
pub struct AggCase {
    pub blocks: Vec<(u8, usize)>,
    pub values: Vec<Vec<f32>>,
    pub weights: Vec<f64>,
    pub mask_bits: u8,
    /// A permutation of `0..values.len()`.
    pub order: Vec<usize>,
}

const COMPONENTS: [Component; 3] = [Component::Backbone, Component::Neck, Component::Head];

impl AggCase {
    pub fn schema(&self) -> Arc<ModelSchema> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &(c, len))| BlockSpec::new(format!("b{i}"), COMPONENTS[c as usize], vec![len]))
            .collect();
        ModelSchema::new("case", blocks).unwrap().into_shared()
    }

    /// The requested mask, or the first block's component when the request
    /// selects nothing.
    pub fn mask(&self) -> ComponentMask {
        let m = ComponentMask::from_bits(self.mask_bits).unwrap();
        if self.blocks.iter().any(|&(c, _)| m.contains(COMPONENTS[c as usize])) {
            m
        } else {
            ComponentMask::of(&[COMPONENTS[self.blocks[0].0 as usize]])
        }
    }

    pub fn params(&self) -> Vec<ParameterSet> {
        let s = self.schema();
        self.values
            .iter()
            .map(|v| ParameterSet::from_flat(Arc::clone(&s), v).unwrap())
            .collect()
    }

    pub fn updates(&self, order: &[usize]) -> Vec<ClientUpdate> {
        let params = self.params();
        let mask = self.mask();
        order
            .iter()
            .map(|&i| ClientUpdate::new(format!("client{i}"), params[i].restrict(mask), self.weights[i], 0.0))
            .collect()
    }

    /// Flat coordinates covered by the mask, in schema order.
    pub fn masked_coords(&self) -> Vec<usize> {
        let mask = self.mask();
        let mut out = Vec::new();
        let mut offset = 0;
        for &(c, len) in &self.blocks {
            if mask.contains(COMPONENTS[c as usize]) {
                out.extend(offset..offset + len);
            }
            offset += len;
        }
        out
    }
}

pub fn agg_case() -> impl Strategy<Value = AggCase> {
    (prop::collection::vec((0u8..3, 1usize..6), 1..6), 1usize..8, 1u8..8).prop_flat_map(|(blocks, n, mask_bits)| {
        let total: usize = blocks.iter().map(|b| b.1).sum();
        (
            Just(blocks),
            prop::collection::vec(prop::collection::vec(-100f32..100f32, total), n),
            prop::collection::vec(0.01f64..1000.0, n),
            Just(mask_bits),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(|(blocks, values, weights, mask_bits, order)| AggCase {
                blocks,
                values,
                weights,
                mask_bits,
                order,
            })
    })
}

/// Naive weighted mean of one coordinate.
pub fn naive_weighted_mean(values: &[Vec<f32>], weights: &[f64], k: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.iter().zip(weights) {
        num += w * v[k] as f64;
        den += w;
    }
    num / den
}

pub fn naive_median(values: &[Vec<f32>], k: usize) -> f64 {
    let mut col: Vec<f64> = values.iter().map(|v| v[k] as f64).collect();
    col.sort_by(f64::total_cmp);
    let n = col.len();
    if n % 2 == 1 {
        col[n / 2]
    } else {
        (col[n / 2 - 1] + col[n / 2]) / 2.0
    }
}

fn masked_flat(p: &fedpa::params::MaskedParams) -> Vec<f32> {
    p.blocks().iter().flatten().copied().collect()
}

pub fn check_avg_matches_oracle(case: &AggCase) -> Result<(), TestCaseError> {
    let ids: Vec<usize> = (0..case.values.len()).collect();
    let out = masked_flat(&fed_avg(&case.updates(&ids), case.mask()).unwrap());
    let coords = case.masked_coords();
    prop_assert_eq!(out.len(), coords.len());
    for (got, &k) in out.iter().zip(&coords) {
        let want = naive_weighted_mean(&case.values, &case.weights, k);
        let rel = (*got as f64 - want).abs() / want.abs().max(f64::from(f32::MIN_POSITIVE));
        prop_assert!(rel <= 1e-6, "coord {}: {} vs {} (rel {})", k, got, want, rel);
    }
    Ok(())
}

pub fn check_permutation_invariance(case: &AggCase) -> Result<(), TestCaseError> {
    let ids: Vec<usize> = (0..case.values.len()).collect();
    let (base, perm) = (case.updates(&ids), case.updates(&case.order));
    let a = masked_flat(&fed_avg(&base, case.mask()).unwrap());
    let b = masked_flat(&fed_avg(&perm, case.mask()).unwrap());
    for (x, y) in a.iter().zip(&b) {
        let rel = (*x as f64 - *y as f64).abs() / (*x as f64).abs().max(f64::from(f32::MIN_POSITIVE));
        prop_assert!(rel <= 1e-9, "average changed under permutation: {} vs {}", x, y);
    }
    let a = fed_median(&base, case.mask()).unwrap();
    let b = fed_median(&perm, case.mask()).unwrap();
    prop_assert!(a.bits_eq(&b), "median changed under permutation");
    Ok(())
}

pub fn check_median_bounded(case: &AggCase) -> Result<(), TestCaseError> {
    let ids: Vec<usize> = (0..case.values.len()).collect();
    let out = masked_flat(&fed_median(&case.updates(&ids), case.mask()).unwrap());
    for (got, &k) in out.iter().zip(&case.masked_coords()) {
        let col: Vec<f32> = case.values.iter().map(|v| v[k]).collect();
        let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(lo <= *got && *got <= hi, "median {} outside [{}, {}]", got, lo, hi);
        let want = naive_median(&case.values, k);
        prop_assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
    Ok(())
}

pub fn check_merge_identity(case: &AggCase) -> Result<(), TestCaseError> {
    let ids: Vec<usize> = (0..case.values.len()).collect();
    let mask = case.mask();
    let agg = fed_avg(&case.updates(&ids), mask).unwrap();
    let params = case.params();
    let local = &params[0];
    let merged = merge(local, &agg, mask).unwrap();
    for (i, spec) in local.schema().blocks().iter().enumerate() {
        let got: Vec<u32> = merged.block(i).iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = if mask.contains(spec.component) {
            agg.get(i).unwrap().iter().map(|v| v.to_bits()).collect()
        } else {
            local.block(i).iter().map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(got, want, "block {}", i);
    }
    Ok(())
}

// ---------------------------------------------------------------- mAP50

#[derive(Debug, Clone)]
pub struct MapCase {
    /// (frame, class, x1, y1, w, h, confidence tenths)
    pub dets: Vec<(u64, u32, i32, i32, i32, i32, u8)>,
    /// (frame, class, x1, y1, w, h)
    pub gts: Vec<(u64, u32, i32, i32, i32, i32)>,
}

/// Integer boxes keep every IoU comparison exact in f64.
pub fn map_case() -> impl Strategy<Value = MapCase> {
    let det = (0u64..2, 0u32..3, 0i32..8, 0i32..8, 1i32..5, 1i32..5, 1u8..10);
    let gt = (0u64..2, 0u32..3, 0i32..8, 0i32..8, 1i32..5, 1i32..5);
    (prop::collection::vec(det, 0..=5), prop::collection::vec(gt, 0..=5)).prop_map(|(dets, gts)| MapCase { dets, gts })
}

fn to_bbox(x: i32, y: i32, w: i32, h: i32) -> BBox {
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
}

impl MapCase {
    pub fn detections(&self) -> Vec<Detection> {
        self.dets
            .iter()
            .map(|&(f, c, x, y, w, h, conf)| Detection {
                frame: FrameKey::new("v", f),
                class_id: c,
                bbox: to_bbox(x, y, w, h),
                confidence: conf as f64 / 10.0,
            })
            .collect()
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.gts
            .iter()
            .map(|&(f, c, x, y, w, h)| GroundTruth {
                frame: FrameKey::new("v", f),
                class_id: c,
                bbox: to_bbox(x, y, w, h),
            })
            .collect()
    }
}

/// 2 * intersection >= union, in integers.
fn iou_at_least_half(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> (i64, i64) {
    let ix = ((a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0)).max(0) as i64;
    let iy = ((a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1)).max(0) as i64;
    let inter = ix * iy;
    let union = (a.2 * a.3) as i64 + (b.2 * b.3) as i64 - inter;
    (inter, union)
}

/// Area under the interpolated precision envelope, integrated over every
/// distinct recall level.
pub fn brute_force_ap(labels: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &l) in labels.iter().enumerate() {
        tp += l as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

/// Greedy matching by descending confidence (input order on ties); each
/// detection takes the unmatched same-frame ground truth of highest IoU.
pub fn oracle_map50(case: &MapCase) -> f64 {
    let classes: BTreeSet<u32> = case.gts.iter().map(|g| g.1).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &classes {
        let mut dets: Vec<(usize, _)> = case.dets.iter().enumerate().filter(|(_, d)| d.1 == c).collect();
        dets.sort_by_key(|(i, d)| (std::cmp::Reverse(d.6), *i));
        let gts: Vec<_> = case.gts.iter().filter(|g| g.1 == c).collect();
        let mut used = vec![false; gts.len()];
        let mut labels = Vec::new();
        for (_, d) in dets {
            let mut best: Option<(usize, i64, i64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.0 != d.0 {
                    continue;
                }
                let (inter, union) = iou_at_least_half((d.2, d.3, d.4, d.5), (gt.2, gt.3, gt.4, gt.5));
                // compare inter/union > best_inter/best_union exactly
                if best.is_none_or(|(_, bi, bu)| inter * bu > bi * union) {
                    best = Some((g, inter, union));
                }
            }
            let tp = match best {
                Some((g, inter, union)) if 2 * inter >= union => {
                    used[g] = true;
                    true
                }
                _ => false,
            };
            labels.push(tp);
        }
        sum += brute_force_ap(&labels, gts.len());
    }
    sum / classes.len() as f64
}

pub fn check_map_oracle(case: &MapCase) -> Result<(), TestCaseError> {
    let got = map50(&case.detections(), &case.ground_truths()).map;
    let want = oracle_map50(case);
    prop_assert!((got - want).abs() <= 1e-9, "pipeline {} vs oracle {}", got, want);
    Ok(())
}

// ---------------------------------------------------------------- partitions

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Iid,
    Group,
    Length,
    Lmo,
}

#[derive(Debug, Clone)]
pub struct PartitionCase {
    pub generator: Generator,
    pub manifest_seed: u64,
    pub seed: u64,
    pub n_clients: usize,
    pub n_classes: u32,
    /// Allowed classes per restricted client (LMO only).
    pub lmo: BTreeMap<usize, BTreeSet<u32>>,
}

pub const N_VIDEOS: usize = 18;

pub fn partition_case(generator: Generator) -> impl Strategy<Value = PartitionCase> {
    (any::<u64>(), any::<u64>(), 2usize..=6, 2u32..=5).prop_flat_map(move |(manifest_seed, seed, n_clients, n_classes)| {
        let restricted = prop::collection::btree_map(
            0..n_clients,
            prop::collection::btree_set(0..n_classes, 1..=n_classes as usize),
            0..=n_clients,
        );
        restricted.prop_map(move |lmo| PartitionCase {
            generator,
            manifest_seed,
            seed,
            n_clients,
            n_classes,
            lmo,
        })
    })
}

impl PartitionCase {
    pub fn manifest(&self) -> DatasetManifest {
        synthetic_manifest(N_VIDEOS, self.n_classes, self.manifest_seed)
    }

    pub fn build(&self, manifest: &DatasetManifest) -> PartitionSpec {
        match self.generator {
            Generator::Iid => partition_iid(manifest, self.n_clients, self.seed).unwrap(),
            Generator::Length => partition_by_length(manifest, self.n_clients).unwrap(),
            Generator::Group => {
                let groups = curation_groups(manifest, "m2cai16", self.n_clients).unwrap();
                partition_by_group(manifest, &groups).unwrap()
            }
            Generator::Lmo => apply_lmo(&partition_iid(manifest, self.n_clients, self.seed).unwrap(), &self.lmo).unwrap(),
        }
    }
}

fn class_histogram(frames: &[fedpa::partition::FrameRecord]) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for f in frames {
        for a in &f.annotations {
            *h.entry(a.class_id).or_default() += 1;
        }
    }
    h
}

pub fn check_partition(case: &PartitionCase) -> Result<(), TestCaseError> {
    let manifest = case.manifest();
    prop_assert_eq!(manifest.videos().len(), N_VIDEOS);
    prop_assert_eq!(&manifest, &case.manifest(), "manifest generation is not deterministic");
    let spec = case.build(&manifest);
    prop_assert_eq!(&spec, &case.build(&manifest), "partition is not deterministic");
    prop_assert_eq!(spec.n_clients(), case.n_clients);
    prop_assert!(spec.validate(&manifest).is_ok());

    // video-disjointness and coverage
    let mut seen = BTreeSet::new();
    for c in &spec.clients {
        prop_assert!(!c.train.is_empty(), "client {} has no videos", c.client_id);
        for v in c.train.iter().chain(&c.valid).chain(&c.test) {
            prop_assert!(seen.insert(v.clone()), "video {} assigned twice", v);
        }
    }
    let all: BTreeSet<String> = manifest.videos().into_iter().collect();
    prop_assert_eq!(&seen, &all);

    // frame conservation
    let mut frames = 0;
    for c in 0..spec.n_clients() {
        frames += client_frames(&manifest, &spec, c, Split::Train).unwrap().len();
    }
    prop_assert_eq!(frames, manifest.frames().len());

    // LMO class-histogram restriction
    for c in 0..spec.n_clients() {
        let restricted = class_histogram(&client_frames(&manifest, &spec, c, Split::Train).unwrap());
        let full = class_histogram(manifest.subset(&spec.clients[c].train).frames());
        match case.lmo.get(&c).filter(|_| case.generator == Generator::Lmo) {
            Some(allowed) => {
                let expected: BTreeMap<u32, usize> =
                    full.into_iter().filter(|(k, _)| allowed.contains(k)).collect();
                prop_assert_eq!(restricted, expected, "client {}", c);
            }
            None => prop_assert_eq!(restricted, full, "client {}", c),
        }
    }
    Ok(())
}
