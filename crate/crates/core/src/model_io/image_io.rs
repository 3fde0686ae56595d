use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::Preprocessing;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// Decodes an 8-bit PNG or binary PGM into `[channels, H, W]` planes in
/// `[0, 1]`, resized to `resize`, without standardization.
///
/// Grayscale is replicated when `channels > 1`; RGB collapses to luma
/// (BT.601 weights) when `channels == 1`. Alpha is ignored.
pub fn load_image_raw(path: impl AsRef<Path>, resize: (usize, usize), channels: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| img_err(e.to_string()))?;

    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = match &img {
        DynamicImage::ImageLuma8(buf) => vec![buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect()],
        DynamicImage::ImageLumaA8(buf) => {
            vec![buf
                .as_raw()
                .chunks_exact(2)
                .map(|p| p[0] as f32 / 255.0)
                .collect()]
        }
        DynamicImage::ImageRgb8(buf) => split_rgb(buf.as_raw(), 3),
        DynamicImage::ImageRgba8(buf) => split_rgb(buf.as_raw(), 4),
        other => {
            return Err(img_err(format!(
                "unsupported bit depth or color type {:?}; expected 8-bit grayscale or RGB",
                other.color()
            )))
        }
    };

    let planes = match (planes.len(), channels) {
        (1, c) => vec![planes[0].clone(); c],
        (3, 3) => planes,
        (3, 1) => vec![planes[0]
            .iter()
            .zip(&planes[1])
            .zip(&planes[2])
            .map(|((&r, &g), &b)| (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) as f32)
            .collect()],
        (n, c) => {
            return Err(img_err(format!(
                "cannot map a {n}-channel image onto a {c}-channel model input"
            )))
        }
    };

    let (rh, rw) = resize;
    let mut data = Vec::with_capacity(channels * rh * rw);
    for plane in planes {
        let t = Tensor::from_vec(&[h, w], plane)?;
        data.extend_from_slice(bilinear_resize(&t, rh, rw)?.data());
    }
    Tensor::from_vec(&[channels, rh, rw], data)
}

fn split_rgb(raw: &[u8], stride: usize) -> Vec<Vec<f32>> {
    (0..3)
        .map(|c| raw.chunks_exact(stride).map(|p| p[c] as f32 / 255.0).collect())
        .collect()
}

/// Loads an image as a standardized `[channels, H, W]` model input.
pub fn load_image(path: impl AsRef<Path>, pre: &Preprocessing, channels: usize) -> Result<Tensor> {
    let mut t = load_image_raw(path, pre.resize, channels)?;
    let plane = pre.resize.0 * pre.resize.1;
    for (c, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let (mean, std) = pre.channel_stats(c);
        for v in chunk {
            *v = (*v - mean) / std;
        }
    }
    Ok(t)
}
