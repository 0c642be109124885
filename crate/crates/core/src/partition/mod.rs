//! Client data splits built from a dataset manifest.
//!
//! The unit of assignment is always the video, never the frame, so adjacent
//! frames of one video can never land in different clients or splits.

mod manifest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::Split;

pub use manifest::{Annotation, DatasetManifest, FrameRecord};
pub use synthetic::{synthetic_manifest, SYNTHETIC_SOURCES};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid client count {n_clients} for {n_videos} videos")]
    ClientCount { n_clients: usize, n_videos: usize },
    #[error("video `{0}` has no client assignment")]
    UnmappedVideo(String),
    #[error("client {0} receives no training videos")]
    EmptyClient(usize),
    #[error("unknown client {0}")]
    UnknownClient(usize),
    #[error("allowed class set for client {0} is empty")]
    EmptyAllowedSet(usize),
    #[error("client {client} allows class {class}, but the manifest has {n_classes} classes")]
    ClassOutOfRange { client: usize, class: u32, n_classes: usize },
    #[error("video `{video}` appears in both {first} and {second}")]
    Overlap { video: String, first: String, second: String },
    #[error("video `{0}` is not in the manifest")]
    UnknownVideo(String),
    #[error("no video has a source tag starting with `{0}`")]
    NoPrimaryVideos(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("failed to parse partition spec: {0}")]
    SpecFormat(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientPartition {
    pub client_id: usize,
    pub train: Vec<String>,
    #[serde(default)]
    pub valid: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    /// Classes whose training annotations this client keeps; `None` keeps all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_classes: Option<BTreeSet<u32>>,
}

impl ClientPartition {
    fn new(client_id: usize, train: Vec<String>) -> Self {
        Self {
            client_id,
            train,
            valid: Vec::new(),
            test: Vec::new(),
            allowed_classes: None,
        }
    }

    pub fn videos(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub seed: u64,
    #[serde(rename = "client")]
    pub clients: Vec<ClientPartition>,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> Result<&ClientPartition, PartitionError> {
        self.clients.get(id).ok_or(PartitionError::UnknownClient(id))
    }

    /// Checks training disjointness, per-client split disjointness, video
    /// existence and allowed-class ranges against `manifest`.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<(), PartitionError> {
        let known: HashSet<String> = manifest.videos().into_iter().collect();
        let mut train_owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, c) in self.clients.iter().enumerate() {
            if c.client_id != i {
                return Err(PartitionError::UnknownClient(c.client_id));
            }
            let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
            for split in Split::ALL {
                for v in c.videos(split) {
                    if !known.contains(v) {
                        return Err(PartitionError::UnknownVideo(v.clone()));
                    }
                    if let Some(prev) = split_of.insert(v, split) {
                        return Err(PartitionError::Overlap {
                            video: v.clone(),
                            first: format!("client {i} {}", prev.as_str()),
                            second: format!("client {i} {}", split.as_str()),
                        });
                    }
                }
            }
            for v in &c.train {
                if let Some(prev) = train_owner.insert(v, i) {
                    return Err(PartitionError::Overlap {
                        video: v.clone(),
                        first: format!("client {prev} train"),
                        second: format!("client {i} train"),
                    });
                }
            }
            if let Some(allowed) = &c.allowed_classes {
                if allowed.is_empty() {
                    return Err(PartitionError::EmptyAllowedSet(i));
                }
                if let Some(&class) = allowed.iter().find(|&&k| k as usize >= manifest.n_classes()) {
                    return Err(PartitionError::ClassOutOfRange {
                        client: i,
                        class,
                        n_classes: manifest.n_classes(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("partition spec serializes")
    }

    pub fn parse(text: &str) -> Result<Self, PartitionError> {
        toml::from_str(text).map_err(|e| PartitionError::SpecFormat(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PartitionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PartitionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PartitionError> {
        manifest::write_text(path.as_ref(), &self.to_text())
    }
}

fn check_count(n_clients: usize, n_videos: usize, min: usize) -> Result<(), PartitionError> {
    if n_clients < min || n_clients > n_videos {
        return Err(PartitionError::ClientCount { n_clients, n_videos });
    }
    Ok(())
}

/// Seeded shuffle of all videos, dealt round-robin.
pub fn partition_iid(manifest: &DatasetManifest, n_clients: usize, seed: u64) -> Result<PartitionSpec, PartitionError> {
    let mut videos = manifest.videos();
    check_count(n_clients, videos.len(), 1)?;
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = vec![Vec::new(); n_clients];
    for (i, v) in videos.into_iter().enumerate() {
        train[i % n_clients].push(v);
    }
    Ok(PartitionSpec {
        seed,
        clients: train
            .into_iter()
            .enumerate()
            .map(|(i, t)| ClientPartition::new(i, t))
            .collect(),
    })
}

/// Assigns each video to the client named by `group_of`. Clients are
/// numbered `0..=max(group_of)` and each must receive at least one video.
pub fn partition_by_group(
    manifest: &DatasetManifest,
    group_of: &BTreeMap<String, usize>,
) -> Result<PartitionSpec, PartitionError> {
    let videos = manifest.videos();
    let mut train: Vec<Vec<String>> = Vec::new();
    for v in videos {
        let c = *group_of.get(&v).ok_or_else(|| PartitionError::UnmappedVideo(v.clone()))?;
        if train.len() <= c {
            train.resize(c + 1, Vec::new());
        }
        train[c].push(v);
    }
    if let Some(empty) = train.iter().position(Vec::is_empty) {
        return Err(PartitionError::EmptyClient(empty));
    }
    Ok(PartitionSpec {
        seed: 0,
        clients: train
            .into_iter()
            .enumerate()
            .map(|(i, t)| ClientPartition::new(i, t))
            .collect(),
    })
}

/// Curation-based grouping: videos whose source tag starts with `primary`
/// go to client 0; the rest are spread over clients `1..n_clients`, longest
/// video first, each to the client with the fewest frames so far.
pub fn curation_groups(
    manifest: &DatasetManifest,
    primary: &str,
    n_clients: usize,
) -> Result<BTreeMap<String, usize>, PartitionError> {
    let sources = manifest.video_sources();
    let counts = manifest.frame_counts();
    let (first, mut rest): (Vec<_>, Vec<_>) = manifest
        .videos()
        .into_iter()
        .partition(|v| sources[v].starts_with(primary));
    if first.is_empty() {
        return Err(PartitionError::NoPrimaryVideos(primary.to_string()));
    }
    if n_clients < 2 || n_clients - 1 > rest.len() {
        return Err(PartitionError::ClientCount {
            n_clients,
            n_videos: sources.len(),
        });
    }
    let mut groups: BTreeMap<String, usize> = first.into_iter().map(|v| (v, 0)).collect();
    sort_by_length(&mut rest, &counts);
    let mut load = vec![0usize; n_clients - 1];
    for v in rest {
        let slot = (0..load.len()).min_by_key(|&i| (load[i], i)).unwrap();
        load[slot] += counts[&v];
        groups.insert(v, slot + 1);
    }
    Ok(groups)
}

/// Descending frame count, ties by ascending video id.
fn sort_by_length(videos: &mut [String], counts: &BTreeMap<String, usize>) {
    videos.sort_by(|a, b| counts[b].cmp(&counts[a]).then_with(|| a.cmp(b)));
}

/// Videos sorted by length and cut into `n_clients` contiguous tiers;
/// client 0 receives the longest tier.
pub fn partition_by_length(manifest: &DatasetManifest, n_clients: usize) -> Result<PartitionSpec, PartitionError> {
    let mut videos = manifest.videos();
    check_count(n_clients, videos.len(), 2)?;
    sort_by_length(&mut videos, &manifest.frame_counts());
    let base = videos.len() / n_clients;
    let extra = videos.len() % n_clients;
    let mut iter = videos.into_iter();
    let clients = (0..n_clients)
        .map(|i| {
            let take = base + usize::from(i < extra);
            ClientPartition::new(i, iter.by_ref().take(take).collect())
        })
        .collect();
    Ok(PartitionSpec { seed: 0, clients })
}

/// Restricts the training annotations of the listed clients to their
/// allowed classes. Clients absent from `allowed` keep every class.
pub fn apply_lmo(spec: &PartitionSpec, allowed: &BTreeMap<usize, BTreeSet<u32>>) -> Result<PartitionSpec, PartitionError> {
    let mut out = spec.clone();
    for (&client, classes) in allowed {
        let c = out.clients.get_mut(client).ok_or(PartitionError::UnknownClient(client))?;
        if classes.is_empty() {
            return Err(PartitionError::EmptyAllowedSet(client));
        }
        c.allowed_classes = Some(classes.clone());
    }
    Ok(out)
}

/// Fixed validation and test videos for one client.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalAssignment {
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Reserves `valid_per_client + test_per_client` videos per client for
/// evaluation (seeded), returning the remaining training pool.
pub fn holdout(
    manifest: &DatasetManifest,
    n_clients: usize,
    valid_per_client: usize,
    test_per_client: usize,
    seed: u64,
) -> Result<(DatasetManifest, Vec<EvalAssignment>), PartitionError> {
    let mut videos = manifest.videos();
    let reserved = n_clients * (valid_per_client + test_per_client);
    if n_clients == 0 || reserved + n_clients > videos.len() {
        return Err(PartitionError::ClientCount {
            n_clients,
            n_videos: videos.len(),
        });
    }
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut iter = videos.iter().cloned();
    let eval: Vec<EvalAssignment> = (0..n_clients)
        .map(|_| EvalAssignment {
            valid: iter.by_ref().take(valid_per_client).collect(),
            test: iter.by_ref().take(test_per_client).collect(),
        })
        .collect();
    let held: HashSet<String> = eval
        .iter()
        .flat_map(|e| e.valid.iter().chain(&e.test).cloned())
        .collect();
    let pool: Vec<String> = manifest.videos().into_iter().filter(|v| !held.contains(v)).collect();
    Ok((manifest.subset(&pool), eval))
}

pub fn with_eval_splits(spec: &PartitionSpec, eval: &[EvalAssignment]) -> Result<PartitionSpec, PartitionError> {
    if eval.len() != spec.n_clients() {
        return Err(PartitionError::ClientCount {
            n_clients: eval.len(),
            n_videos: spec.n_clients(),
        });
    }
    let mut out = spec.clone();
    for (c, e) in out.clients.iter_mut().zip(eval) {
        c.valid = e.valid.clone();
        c.test = e.test.clone();
    }
    Ok(out)
}

/// Frames of one client split. Training frames carry only allowed classes;
/// evaluation splits always keep the full label set.
pub fn client_frames(
    manifest: &DatasetManifest,
    spec: &PartitionSpec,
    client: usize,
    split: Split,
) -> Result<Vec<FrameRecord>, PartitionError> {
    let c = spec.client(client)?;
    let frames = manifest.frames_of(c.videos(split)).cloned();
    Ok(match (&c.allowed_classes, split) {
        (Some(allowed), Split::Train) => frames
            .map(|mut f| {
                f.annotations.retain(|a| allowed.contains(&a.class_id));
                f
            })
            .collect(),
        _ => frames.collect(),
    })
}

pub fn client_file_name(client: usize, split: Split) -> String {
    format!("client{client}_{}.tsv", split.as_str())
}

/// Writes one manifest per client per split into `out_dir`.
pub fn materialize(
    spec: &PartitionSpec,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, PartitionError> {
    spec.validate(manifest)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| PartitionError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for client in 0..spec.n_clients() {
        for split in Split::ALL {
            let frames = client_frames(manifest, spec, client, split)?;
            let path = out_dir.join(client_file_name(client, split));
            manifest::write_text(&path, &manifest::render(manifest.class_names(), frames.iter()))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::BBox;

    fn manifest(lengths: &[(&str, usize, &str)]) -> DatasetManifest {
        let mut frames = Vec::new();
        for (v, n, tag) in lengths {
            for f in 0..*n {
                frames.push(FrameRecord {
                    video_id: v.to_string(),
                    frame_id: f as u64,
                    source_tag: tag.to_string(),
                    annotations: vec![],
                });
            }
        }
        DatasetManifest::new(frames, vec!["grasper".into(), "scissors".into()]).unwrap()
    }

    fn nine() -> DatasetManifest {
        let names: Vec<String> = (0..9).map(|i| format!("v{i}")).collect();
        manifest(&names.iter().map(|n| (n.as_str(), 2, "x")).collect::<Vec<_>>())
    }

    #[test]
    fn iid_even_deal() {
        let spec = partition_iid(&nine(), 3, 7).unwrap();
        assert!(spec.clients.iter().all(|c| c.train.len() == 3));
        spec.validate(&nine()).unwrap();
        assert_eq!(spec, partition_iid(&nine(), 3, 7).unwrap());
        assert!(matches!(partition_iid(&nine(), 0, 7), Err(PartitionError::ClientCount { .. })));
        assert!(matches!(partition_iid(&nine(), 10, 7), Err(PartitionError::ClientCount { .. })));
    }

    #[test]
    fn length_tiers() {
        let m = manifest(&[("b", 50, "x"), ("a", 100, "x"), ("c", 10, "x")]);
        let spec = partition_by_length(&m, 3).unwrap();
        assert_eq!(spec.clients[0].train, vec!["a"]);
        assert_eq!(spec.clients[2].train, vec!["c"]);
        let tie = manifest(&[("z", 5, "x"), ("y", 5, "x"), ("x", 1, "x"), ("w", 1, "x")]);
        let spec = partition_by_length(&tie, 2).unwrap();
        assert_eq!(spec.clients[0].train, vec!["y", "z"]);
        assert_eq!(spec.clients[1].train, vec!["w", "x"]);
        assert!(partition_by_length(&tie, 1).is_err());
        assert!(partition_by_length(&tie, 5).is_err());
    }

    #[test]
    fn group_mapping() {
        let m = manifest(&[("v1", 3, "m2cai16"), ("VID01", 5, "cholectrack20"), ("v2", 2, "m2cai16"), ("VID02", 4, "cholectrack20"), ("VID03", 1, "cholectrack20")]);
        let groups = curation_groups(&m, "m2cai", 3).unwrap();
        let spec = partition_by_group(&m, &groups).unwrap();
        assert_eq!(spec.clients[0].train, vec!["v1", "v2"]);
        assert!(spec.clients[1..].iter().all(|c| c.train.iter().all(|v| v.starts_with("VID"))));
        spec.validate(&m).unwrap();

        let all_zero: BTreeMap<String, usize> = m.videos().into_iter().map(|v| (v, 0)).collect();
        let one = partition_by_group(&m, &all_zero).unwrap();
        assert_eq!(one.n_clients(), 1);
        assert_eq!(one.clients[0].train.len(), 5);

        let mut missing = all_zero.clone();
        missing.remove("v2");
        assert!(matches!(partition_by_group(&m, &missing), Err(PartitionError::UnmappedVideo(v)) if v == "v2"));
        assert!(matches!(curation_groups(&m, "nope", 3), Err(PartitionError::NoPrimaryVideos(_))));
    }

    #[test]
    fn lmo_filters_training_only() {
        let b = BBox::normalized(0.1, 0.1, 0.2, 0.2).unwrap();
        let frames = ["v0", "v1", "v2", "v3"]
            .iter()
            .map(|v| FrameRecord {
                video_id: v.to_string(),
                frame_id: 0,
                source_tag: "x".into(),
                annotations: vec![Annotation { class_id: 0, bbox: b }, Annotation { class_id: 1, bbox: b }],
            })
            .collect();
        let m = DatasetManifest::new(frames, vec!["grasper".into(), "scissors".into()]).unwrap();
        let spec = partition_iid(&m, 2, 0).unwrap();
        let spec = with_eval_splits(&spec, &[EvalAssignment::default(), EvalAssignment::default()]).unwrap();
        let allowed = BTreeMap::from([(1usize, BTreeSet::from([1u32]))]);
        let lmo = apply_lmo(&spec, &allowed).unwrap();
        lmo.validate(&m).unwrap();
        let c1 = client_frames(&m, &lmo, 1, Split::Train).unwrap();
        assert!(c1.iter().all(|f| f.annotations.len() == 1 && f.annotations[0].class_id == 1));
        let c0 = client_frames(&m, &lmo, 0, Split::Train).unwrap();
        assert!(c0.iter().all(|f| f.annotations.len() == 2));

        assert!(matches!(
            apply_lmo(&spec, &BTreeMap::from([(5usize, BTreeSet::from([0u32]))])),
            Err(PartitionError::UnknownClient(5))
        ));
        assert!(matches!(
            apply_lmo(&spec, &BTreeMap::from([(0usize, BTreeSet::new())])),
            Err(PartitionError::EmptyAllowedSet(0))
        ));
        let out_of_range = apply_lmo(&spec, &BTreeMap::from([(0usize, BTreeSet::from([9u32]))])).unwrap();
        assert!(matches!(out_of_range.validate(&m), Err(PartitionError::ClassOutOfRange { .. })));
    }

    #[test]
    fn holdout_reserves_disjoint_eval_videos() {
        let m = nine();
        let (pool, eval) = holdout(&m, 3, 1, 1, 4).unwrap();
        assert_eq!(pool.videos().len(), 3);
        let spec = with_eval_splits(&partition_iid(&pool, 3, 1).unwrap(), &eval).unwrap();
        spec.validate(&m).unwrap();
        assert!(holdout(&m, 3, 1, 2, 4).is_err());
    }

    #[test]
    fn validate_detects_overlap() {
        let m = nine();
        let mut spec = partition_iid(&m, 3, 1).unwrap();
        let stolen = spec.clients[0].train[0].clone();
        spec.clients[1].train.push(stolen.clone());
        assert!(matches!(spec.validate(&m), Err(PartitionError::Overlap { .. })));
        let mut leak = partition_iid(&m, 3, 1).unwrap();
        let v = leak.clients[0].train[0].clone();
        leak.clients[0].test.push(v);
        assert!(matches!(leak.validate(&m), Err(PartitionError::Overlap { .. })));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = apply_lmo(
            &partition_iid(&nine(), 3, 2).unwrap(),
            &BTreeMap::from([(2usize, BTreeSet::from([0u32, 1]))]),
        )
        .unwrap();
        assert_eq!(PartitionSpec::parse(&spec.to_text()).unwrap(), spec);
    }
}
