//! Dataset manifest: one frame per line, tab-separated
//! `video_id  frame_id  source_tag  annotations`, where annotations are
//! `class_id,x1,y1,x2,y2` entries joined by `;` in normalized coordinates.
//!
//! An optional `#classes` header line lists class names, tab-separated.
//! Other lines starting with `#` are comments.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::evaluation::{BBox, FrameKey, GroundTruth};

use super::PartitionError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_id: u64,
    pub source_tag: String,
    pub annotations: Vec<Annotation>,
}

impl FrameRecord {
    pub fn key(&self) -> FrameKey {
        FrameKey::new(self.video_id.clone(), self.frame_id)
    }

    pub fn ground_truths(&self) -> impl Iterator<Item = GroundTruth> + '_ {
        self.annotations.iter().map(|a| GroundTruth {
            frame: self.key(),
            class_id: a.class_id,
            bbox: a.bbox,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    frames: Vec<FrameRecord>,
    class_names: Vec<String>,
}

const CLASSES_HEADER: &str = "#classes";

impl DatasetManifest {
    pub fn new(frames: Vec<FrameRecord>, class_names: Vec<String>) -> Result<Self, PartitionError> {
        let mut seen = HashSet::new();
        for f in &frames {
            if !seen.insert((f.video_id.as_str(), f.frame_id)) {
                return Err(PartitionError::Manifest(format!(
                    "duplicate frame {}#{}",
                    f.video_id, f.frame_id
                )));
            }
            for a in &f.annotations {
                if a.class_id as usize >= class_names.len() {
                    return Err(PartitionError::Manifest(format!(
                        "frame {}#{} uses class {} but only {} classes are defined",
                        f.video_id,
                        f.frame_id,
                        a.class_id,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Self { frames, class_names })
    }

    /// Class names default to `class0..classN` when the header is absent.
    pub fn parse(text: &str) -> Result<Self, PartitionError> {
        let mut frames = Vec::new();
        let mut class_names: Option<Vec<String>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let err = |message: String| PartitionError::Parse { line: n + 1, message };
            if let Some(rest) = line.strip_prefix(CLASSES_HEADER) {
                class_names = Some(
                    rest.split('\t')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect(),
                );
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(err(format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(err("empty video_id".into()));
            }
            let frame_id = fields[1].parse::<u64>().map_err(|e| err(format!("frame_id: {e}")))?;
            let mut annotations = Vec::new();
            if let Some(spec) = fields.get(3) {
                for item in spec.split(';').filter(|s| !s.is_empty()) {
                    annotations.push(parse_annotation(item).map_err(err)?);
                }
            }
            frames.push(FrameRecord {
                video_id: fields[0].to_string(),
                frame_id,
                source_tag: fields[2].to_string(),
                annotations,
            });
        }
        let class_names = class_names.unwrap_or_else(|| {
            let n = frames
                .iter()
                .flat_map(|f| f.annotations.iter().map(|a| a.class_id as usize + 1))
                .max()
                .unwrap_or(0);
            (0..n).map(|i| format!("class{i}")).collect()
        });
        Self::new(frames, class_names)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PartitionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PartitionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            PartitionError::Parse { line, message } => {
                PartitionError::Manifest(format!("{}:{line}: {message}", path.display()))
            }
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        render(&self.class_names, self.frames.iter())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PartitionError> {
        write_text(path.as_ref(), &self.to_text())
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct video ids in order of first appearance.
    pub fn videos(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.frames
            .iter()
            .filter(|f| seen.insert(f.video_id.as_str()))
            .map(|f| f.video_id.clone())
            .collect()
    }

    pub fn frame_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.frames {
            *counts.entry(f.video_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Source tag of each video (taken from its first frame).
    pub fn video_sources(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for f in &self.frames {
            out.entry(f.video_id.clone()).or_insert_with(|| f.source_tag.clone());
        }
        out
    }

    /// Frames belonging to `videos`, in manifest order.
    pub fn frames_of<'a>(&'a self, videos: &'a [String]) -> impl Iterator<Item = &'a FrameRecord> + 'a {
        let set: HashSet<&str> = videos.iter().map(String::as_str).collect();
        self.frames.iter().filter(move |f| set.contains(f.video_id.as_str()))
    }

    /// Manifest restricted to `videos`, keeping class names.
    pub fn subset(&self, videos: &[String]) -> DatasetManifest {
        DatasetManifest {
            frames: self.frames_of(videos).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn parse_annotation(item: &str) -> Result<Annotation, String> {
    let parts: Vec<&str> = item.split(',').collect();
    if parts.len() != 5 {
        return Err(format!("annotation `{item}` must be class_id,x1,y1,x2,y2"));
    }
    let class_id = parts[0]
        .trim()
        .parse::<u32>()
        .map_err(|e| format!("annotation `{item}`: class_id: {e}"))?;
    let mut c = [0.0f64; 4];
    for (slot, p) in c.iter_mut().zip(&parts[1..]) {
        *slot = p
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("annotation `{item}`: {e}"))?;
    }
    let bbox = BBox::normalized(c[0], c[1], c[2], c[3]).map_err(|e| format!("annotation `{item}`: {e}"))?;
    Ok(Annotation { class_id, bbox })
}

pub(crate) fn render<'a>(class_names: &[String], frames: impl Iterator<Item = &'a FrameRecord>) -> String {
    let mut out = String::new();
    if !class_names.is_empty() {
        out.push_str(CLASSES_HEADER);
        for name in class_names {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
    }
    for f in frames {
        let _ = write!(out, "{}\t{}\t{}\t", f.video_id, f.frame_id, f.source_tag);
        for (i, a) in f.annotations.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            let _ = write!(out, "{},{},{},{},{}", a.class_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2);
        }
        out.push('\n');
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), PartitionError> {
    std::fs::write(path, text).map_err(|source| PartitionError::Io {
        path: path.display().to_string(),
        source,
    })
}
