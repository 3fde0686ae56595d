//! Hand-built "planted-patch detector" and its synthetic dataset.
//!
//! Images are 64x64 grayscale: dim noise everywhere, and for lesion samples a
//! bright 8x8 patch whose box is the ground truth. The detector standardizes
//! with mean 0.5 / std 0.5, so background pixels are negative and patch
//! pixels positive; the network carries no biases.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model_io::{BoundingBox, Conv2d, Dense, Layer, ModelGraph, Pool2d, Preprocessing, Sample};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const PATCH_SIZE: usize = 8;
pub const LESION: &str = "lesion";
pub const NORMAL: &str = "normal";
pub const DATASET_FILE: &str = "dataset.jsonl";

fn conv3x3(out_ch: usize, in_ch: usize, weight: impl Fn(usize, usize) -> f32) -> Layer {
    let mut data = Vec::with_capacity(out_ch * in_ch * 9);
    for o in 0..out_ch {
        for i in 0..in_ch {
            data.extend(std::iter::repeat_n(weight(o, i), 9));
        }
    }
    let w = Tensor::from_vec(&[out_ch, in_ch, 3, 3], data).expect("static shape");
    Layer::Conv2d(Conv2d::new(w, None, 1, 1).expect("static conv"))
}

/// Channel 0 responds to bright regions, channel 1 to dim background; the
/// bright path is mildly inhibited by the dim one at each stage.
pub fn planted_patch_model() -> ModelGraph {
    let pool = || Layer::MaxPool2d(Pool2d { kernel: 2, stride: 2 });
    let stage = || {
        conv3x3(2, 2, |o, i| match (o, i) {
            (0, 0) | (1, 1) => 1.0 / 9.0,
            (0, 1) => -1.0 / 36.0,
            _ => 0.0,
        })
    };
    let head = Tensor::from_vec(&[2, 2], vec![10.0, -0.05, -10.0, 0.05]).expect("static shape");
    let layers = vec![
        conv3x3(2, 1, |o, _| if o == 0 { 1.0 / 9.0 } else { -1.0 / 9.0 }),
        Layer::Relu,
        Layer::AvgPool2d(Pool2d { kernel: 2, stride: 2 }),
        stage(),
        Layer::Relu,
        pool(),
        stage(),
        Layer::Relu,
        pool(),
        Layer::GlobalAvgPool,
        Layer::Dense(Dense::new(head, None).expect("static dense")),
    ];
    ModelGraph::new(
        Shape::new(vec![1, IMAGE_SIZE, IMAGE_SIZE]).expect("static shape"),
        layers,
        vec![LESION.into(), NORMAL.into()],
        Preprocessing {
            mean: vec![0.5],
            std: vec![0.5],
            resize: (IMAGE_SIZE, IMAGE_SIZE),
        },
    )
    .expect("fixture model is valid")
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(pixels).map_err(|e| Error::io(path, e))
}

/// Generates `n` images (even indices carry a patch) plus `dataset.jsonl`
/// into `dir`. Output is a pure function of `(n, seed)`.
pub fn write_planted_patch_dataset(dir: &Path, n: usize, seed: u64) -> Result<Vec<Sample>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let mut px: Vec<u8> = (0..IMAGE_SIZE * IMAGE_SIZE)
            .map(|_| rng.gen_range(13..=89))
            .collect();
        let lesion = k % 2 == 0;
        let mut boxes = Vec::new();
        if lesion {
            let x = rng.gen_range(0..=IMAGE_SIZE - PATCH_SIZE);
            let y = rng.gen_range(0..=IMAGE_SIZE - PATCH_SIZE);
            for yy in y..y + PATCH_SIZE {
                for xx in x..x + PATCH_SIZE {
                    px[yy * IMAGE_SIZE + xx] = rng.gen_range(217..=255);
                }
            }
            boxes.push(BoundingBox {
                x,
                y,
                w: PATCH_SIZE,
                h: PATCH_SIZE,
            });
        }
        let name = format!("img_{k:02}.pgm");
        write_pgm(&dir.join(&name), IMAGE_SIZE, IMAGE_SIZE, &px)?;
        let label = if lesion { LESION } else { NORMAL };
        let box_json: Vec<String> = boxes
            .iter()
            .map(|b| format!("[{},{},{},{}]", b.x, b.y, b.w, b.h))
            .collect();
        manifest.push_str(&format!(
            "{{\"image\": \"{name}\", \"label\": \"{label}\", \"boxes\": [{}]}}\n",
            box_json.join(", ")
        ));
        samples.push(Sample {
            image_path: dir.join(&name),
            class_label: label.into(),
            boxes,
        });
    }
    let path = dir.join(DATASET_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}
