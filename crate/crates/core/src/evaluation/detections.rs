//! Offline detections file: tab-separated
//! `video_id frame_id class_id confidence x1 y1 x2 y2`, one detection per line.

use std::fmt::Write as _;
use std::path::Path;

use super::{BBox, Detection, EvalError, FrameKey};

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_detections(&text, &path.display().to_string())
}

pub(crate) fn parse_detections(text: &str, origin: &str) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            path: origin.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 tab-separated fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, EvalError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", i + 1)))
        };
        let frame_id = fields[1]
            .parse::<u64>()
            .map_err(|e| err(format!("frame_id: {e}")))?;
        let class_id = fields[2]
            .parse::<u32>()
            .map_err(|e| err(format!("class_id: {e}")))?;
        let confidence = num(3)?;
        if !confidence.is_finite() {
            return Err(err(format!("confidence {confidence} is not finite")));
        }
        let bbox = BBox::new(num(4)?, num(5)?, num(6)?, num(7)?).map_err(|e| err(e.to_string()))?;
        out.push(Detection {
            frame: FrameKey::new(fields[0], frame_id),
            class_id,
            bbox,
            confidence,
        });
    }
    Ok(out)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut text = String::new();
    for d in dets {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            d.frame.video_id, d.frame.frame_id, d.class_id, d.confidence, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        );
    }
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
