//! Seeded synthetic manifests for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, DatasetManifest, FrameRecord};
use crate::evaluation::BBox;

/// Source tags cycled over the generated videos.
pub const SYNTHETIC_SOURCES: [&str; 3] = ["m2cai16", "cholec80", "cholectrack20"];

/// `n_videos` videos of 4 to 15 frames, each frame holding 1 to 3 boxes of
/// `n_classes` classes. Video `i` is named `vid{i:02}` and tagged with
/// `SYNTHETIC_SOURCES[i % 3]`.
pub fn synthetic_manifest(n_videos: usize, n_classes: u32, seed: u64) -> DatasetManifest {
    assert!(n_classes > 0, "at least one class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    for v in 0..n_videos {
        let n_frames = rng.random_range(4..16u64);
        for f in 0..n_frames {
            let n_boxes = rng.random_range(1..4);
            let annotations = (0..n_boxes)
                .map(|_| {
                    let w = rng.random_range(0.05..0.3);
                    let h = rng.random_range(0.05..0.3);
                    let x = rng.random_range(0.0..1.0 - w);
                    let y = rng.random_range(0.0..1.0 - h);
                    Annotation {
                        class_id: rng.random_range(0..n_classes),
                        bbox: BBox::normalized(x, y, x + w, y + h).expect("box inside the unit square"),
                    }
                })
                .collect();
            frames.push(FrameRecord {
                video_id: format!("vid{v:02}"),
                frame_id: f,
                source_tag: SYNTHETIC_SOURCES[v % SYNTHETIC_SOURCES.len()].to_string(),
                annotations,
            });
        }
    }
    let names = (0..n_classes).map(|c| format!("tool{c}")).collect();
    DatasetManifest::new(frames, names).expect("synthetic manifest is valid")
}
