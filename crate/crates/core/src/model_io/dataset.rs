use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

/// Axis-aligned box in the model-input pixel frame, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Resolved against the manifest's directory when relative.
    pub image_path: PathBuf,
    pub class_label: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    label: String,
    boxes: Vec<[usize; 4]>,
}

/// Parses a line-delimited dataset manifest. Blank lines are skipped; every
/// box must fit inside `frame = (height, width)`.
pub fn load_dataset_manifest(path: impl AsRef<Path>, frame: (usize, usize)) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let (height, width) = frame;

    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let mut boxes = Vec::with_capacity(rec.boxes.len());
        for [x, y, w, h] in rec.boxes {
            let b = BoundingBox { x, y, w, h };
            if !b.fits(height, width) {
                return Err(err(format!(
                    "box [{x},{y},{w},{h}] is empty or outside the {height}x{width} input frame"
                )));
            }
            boxes.push(b);
        }
        let image = PathBuf::from(&rec.image);
        samples.push(Sample {
            image_path: if image.is_absolute() {
                image
            } else {
                base.join(image)
            },
            class_label: rec.label,
            boxes,
        });
    }
    Ok(samples)
}
