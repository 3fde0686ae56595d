use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Conv2d, Dense, Layer, ModelGraph, Pool2d, Preprocessing};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    input_shape: Vec<usize>,
    preprocessing: PreprocessingEntry,
    class_names: Vec<String>,
    layers: Vec<Map<String, Value>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessingEntry {
    mean: Vec<f32>,
    std: Vec<f32>,
    resize: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseEntry {
    in_features: usize,
    out_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    has_bias: Option<bool>,
    weight_offset: u64,
    bias_offset: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvEntry {
    in_ch: usize,
    out_ch: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    has_bias: Option<bool>,
    weight_offset: u64,
    bias_offset: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolEntry {
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchNormEntry {
    num_features: usize,
    eps: f64,
    gamma_offset: u64,
    beta_offset: u64,
    mean_offset: u64,
    var_offset: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

/// Little-endian f32 blob with bounds-checked slicing.
struct Blob {
    bytes: Vec<u8>,
}

impl Blob {
    fn floats(&self, offset: u64, count: usize) -> Vec<f32> {
        let start = offset as usize;
        self.bytes[start..start + 4 * count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }
}

/// Byte regions a manifest refers to, checked against the blob length.
#[derive(Default)]
struct Regions {
    required: u64,
}

impl Regions {
    fn claim(&mut self, layer: usize, what: &str, offset: u64, count: usize) -> Result<()> {
        if !offset.is_multiple_of(4) {
            return Err(Error::Model(format!(
                "layer {layer} {what} offset {offset} is not a multiple of 4"
            )));
        }
        self.required = self.required.max(offset + 4 * count as u64);
        Ok(())
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(
    k: usize,
    kind: &str,
    params: Map<String, Value>,
) -> Result<T> {
    serde_json::from_value(Value::Object(params))
        .map_err(|e| Error::Model(format!("layer {k} ({kind}): {e}")))
}

enum Pending {
    Dense(DenseEntry),
    Conv(ConvEntry),
    Simple(Layer),
    BatchNorm(BatchNormEntry),
}

/// Loads `model.json` + `weights.bin` from `dir`, folding any BatchNorm entries.
pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let input_shape =
        Shape::new(manifest.input_shape.clone()).map_err(|e| Error::Model(format!("input_shape: {e}")))?;

    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = Blob {
        bytes: fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?,
    };

    // First pass: parse entries and claim blob regions so a short blob is
    // reported before any slicing happens.
    let n_entries = manifest.layers.len();
    let mut regions = Regions::default();
    let mut parsed: Vec<(usize, String, Map<String, Value>)> = Vec::with_capacity(n_entries);
    for (k, mut entry) in manifest.layers.into_iter().enumerate() {
        let kind = match entry.remove("kind") {
            Some(Value::String(s)) => s,
            _ => return Err(Error::Model(format!("layer {k} has no string `kind`"))),
        };
        match kind.as_str() {
            "Softmax" | "Sigmoid" | "LogSoftmax" if k + 1 == n_entries => {
                return Err(Error::Model(format!(
                    "layer {k} is {kind}: classification layer must be excluded"
                )))
            }
            "Dense" | "Conv2D" | "ReLU" | "MaxPool2D" | "AvgPool2D" | "GlobalAvgPool" | "Flatten"
            | "BatchNorm" => {}
            other => return Err(Error::Model(format!("layer {k}: unsupported layer `{other}`"))),
        }
        parsed.push((k, kind, entry));
    }

    let mut pending = Vec::with_capacity(parsed.len());
    for (k, kind, params) in parsed {
        let item = match kind.as_str() {
            "Dense" => {
                let e: DenseEntry = parse_params(k, &kind, params)?;
                check_has_bias(k, e.has_bias, e.bias_offset)?;
                if e.in_features == 0 || e.out_features == 0 {
                    return Err(Error::Model(format!(
                        "layer {k} weight shape has a zero dimension"
                    )));
                }
                let n = e.in_features * e.out_features;
                regions.claim(k, "weight", e.weight_offset, n)?;
                if let Some(off) = e.bias_offset {
                    regions.claim(k, "bias", off, e.out_features)?;
                }
                Pending::Dense(e)
            }
            "Conv2D" => {
                let e: ConvEntry = parse_params(k, &kind, params)?;
                check_has_bias(k, e.has_bias, e.bias_offset)?;
                let dims = [e.out_ch, e.in_ch, e.kernel_h, e.kernel_w];
                if dims.contains(&0) {
                    return Err(Error::Model(format!(
                        "layer {k} weight shape has a zero dimension"
                    )));
                }
                if e.stride == 0 {
                    return Err(Error::Model(format!("layer {k} stride must be at least 1")));
                }
                regions.claim(k, "weight", e.weight_offset, dims.iter().product())?;
                if let Some(off) = e.bias_offset {
                    regions.claim(k, "bias", off, e.out_ch)?;
                }
                Pending::Conv(e)
            }
            "MaxPool2D" | "AvgPool2D" => {
                let e: PoolEntry = parse_params(k, &kind, params)?;
                let pool = Pool2d {
                    kernel: e.kernel,
                    stride: e.stride,
                };
                Pending::Simple(if kind == "MaxPool2D" {
                    Layer::MaxPool2d(pool)
                } else {
                    Layer::AvgPool2d(pool)
                })
            }
            "BatchNorm" => {
                let e: BatchNormEntry = parse_params(k, &kind, params)?;
                for (what, off) in [
                    ("gamma", e.gamma_offset),
                    ("beta", e.beta_offset),
                    ("mean", e.mean_offset),
                    ("var", e.var_offset),
                ] {
                    regions.claim(k, what, off, e.num_features)?;
                }
                Pending::BatchNorm(e)
            }
            simple => {
                let _: NoParams = parse_params(k, simple, params)?;
                Pending::Simple(match simple {
                    "ReLU" => Layer::Relu,
                    "GlobalAvgPool" => Layer::GlobalAvgPool,
                    _ => Layer::Flatten,
                })
            }
        };
        pending.push((k, item));
    }

    if (blob.bytes.len() as u64) < regions.required {
        return Err(Error::Model(format!(
            "{} is {} bytes but the manifest requires {} bytes",
            weights_path.display(),
            blob.bytes.len(),
            regions.required
        )));
    }

    // Second pass: materialize weights, fold BatchNorm, check shapes in
    // manifest numbering.
    let mut layers: Vec<Layer> = Vec::with_capacity(pending.len());
    let mut shape = input_shape.clone();
    let mut last_linear_entry: Option<usize> = None;
    for (k, item) in pending {
        match item {
            Pending::BatchNorm(bn) => {
                let prev = layers
                    .last_mut()
                    .filter(|_| last_linear_entry == Some(k.wrapping_sub(1)));
                let Some(prev) = prev else {
                    return Err(Error::Model(format!(
                        "layer {k}: BatchNorm must directly follow Conv2D or Dense"
                    )));
                };
                fold_batch_norm(k, prev, &bn, &blob)?;
            }
            other => {
                let layer = materialize(other, &blob);
                shape = layer
                    .output_shape(&shape)
                    .map_err(|msg| Error::Model(format!("layer {k} {msg}")))?;
                last_linear_entry = layer.is_linear().then_some(k);
                layers.push(layer);
            }
        }
    }

    let preprocessing = Preprocessing {
        mean: manifest.preprocessing.mean,
        std: manifest.preprocessing.std,
        resize: (manifest.preprocessing.resize[0], manifest.preprocessing.resize[1]),
    };
    ModelGraph::new(input_shape, layers, manifest.class_names, preprocessing)
}

fn check_has_bias(k: usize, has_bias: Option<bool>, offset: Option<u64>) -> Result<()> {
    match has_bias {
        Some(flag) if flag != offset.is_some() => Err(Error::Model(format!(
            "layer {k}: has_bias={flag} contradicts bias_offset"
        ))),
        _ => Ok(()),
    }
}

fn materialize(item: Pending, blob: &Blob) -> Layer {
    let tensor = |dims: &[usize], offset: u64| {
        let shape = Shape::new(dims.to_vec()).expect("non-zero dims checked");
        let n = shape.numel();
        Tensor::new(shape, blob.floats(offset, n)).expect("length matches shape")
    };
    match item {
        Pending::Dense(e) => Layer::Dense(Dense {
            weight: tensor(&[e.out_features, e.in_features], e.weight_offset),
            bias: e.bias_offset.map(|off| tensor(&[e.out_features], off)),
        }),
        Pending::Conv(e) => Layer::Conv2d(Conv2d {
            weight: tensor(&[e.out_ch, e.in_ch, e.kernel_h, e.kernel_w], e.weight_offset),
            bias: e.bias_offset.map(|off| tensor(&[e.out_ch], off)),
            stride: e.stride,
            padding: e.padding,
        }),
        Pending::Simple(layer) => layer,
        Pending::BatchNorm(_) => unreachable!("folded by the caller"),
    }
}

/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`,
/// per output unit, evaluated in f64.
fn fold_batch_norm(k: usize, layer: &mut Layer, bn: &BatchNormEntry, blob: &Blob) -> Result<()> {
    let (weight, bias) = match layer {
        Layer::Dense(d) => (&mut d.weight, &mut d.bias),
        Layer::Conv2d(c) => (&mut c.weight, &mut c.bias),
        _ => unreachable!("caller checks linearity"),
    };
    let out = weight.dims()[0];
    if bn.num_features != out {
        return Err(Error::Model(format!(
            "layer {k}: BatchNorm has {} features but the preceding layer has {out} outputs",
            bn.num_features
        )));
    }
    if bn.eps.is_nan() || bn.eps < 0.0 {
        return Err(Error::Model(format!(
            "layer {k}: BatchNorm eps must be non-negative"
        )));
    }
    let gamma = blob.floats(bn.gamma_offset, out);
    let beta = blob.floats(bn.beta_offset, out);
    let mean = blob.floats(bn.mean_offset, out);
    let var = blob.floats(bn.var_offset, out);

    let per_unit = weight.len() / out;
    let mut new_bias = Vec::with_capacity(out);
    for o in 0..out {
        let denom = (var[o] as f64 + bn.eps).sqrt();
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::Model(format!(
                "layer {k}: BatchNorm variance + eps is not positive for unit {o}"
            )));
        }
        let scale = gamma[o] as f64 / denom;
        for w in &mut weight.data_mut()[o * per_unit..(o + 1) * per_unit] {
            *w = (*w as f64 * scale) as f32;
        }
        let b = bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
        new_bias.push(((b - mean[o] as f64) * scale + beta[o] as f64) as f32);
    }
    *bias = Some(Tensor::from_vec(&[out], new_bias)?);
    Ok(())
}

/// Writes `model` as `model.json` + `weights.bin` into `dir` (created if
/// missing). Tensors are packed back to back, each bias directly after its
/// weights.
pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob: Vec<u8> = Vec::new();
    let mut push = |t: &Tensor| -> u64 {
        let off = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        off
    };

    let mut entries = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut obj = match layer {
            Layer::Dense(d) => {
                let weight_offset = push(&d.weight);
                let bias_offset = d.bias.as_ref().map(&mut push);
                to_map(DenseEntry {
                    in_features: d.in_features(),
                    out_features: d.out_features(),
                    has_bias: None,
                    weight_offset,
                    bias_offset,
                })
            }
            Layer::Conv2d(c) => {
                let weight_offset = push(&c.weight);
                let bias_offset = c.bias.as_ref().map(&mut push);
                let (kernel_h, kernel_w) = c.kernel();
                to_map(ConvEntry {
                    in_ch: c.in_channels(),
                    out_ch: c.out_channels(),
                    kernel_h,
                    kernel_w,
                    stride: c.stride,
                    padding: c.padding,
                    has_bias: None,
                    weight_offset,
                    bias_offset,
                })
            }
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => to_map(PoolEntry {
                kernel: p.kernel,
                stride: p.stride,
            }),
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => Map::new(),
        };
        obj.insert("kind".into(), Value::String(layer.kind_name().into()));
        entries.push(obj);
    }

    let pre = model.preprocessing();
    let manifest = ManifestFile {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().dims().to_vec(),
        preprocessing: PreprocessingEntry {
            mean: pre.mean.clone(),
            std: pre.std.clone(),
            resize: [pre.resize.0, pre.resize.1],
        },
        class_names: model.class_names().to_vec(),
        layers: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = dir.join(MODEL_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, blob).map_err(|e| Error::io(&weights_path, e))?;
    Ok(())
}

fn to_map<T: Serialize>(entry: T) -> Map<String, Value> {
    match serde_json::to_value(entry).expect("entry serializes") {
        Value::Object(m) => m,
        _ => unreachable!("entries are structs"),
    }
}
