//! Sequential model graphs and the on-disk formats they are read from.
//!
//! A model directory holds `model.json` (architecture, preprocessing, class
//! names, byte offsets into the blob) and `weights.bin` (little-endian `f32`,
//! row-major). BatchNorm entries are folded into the preceding Conv2D/Dense
//! layer at load time and never appear in a [`ModelGraph`].

mod dataset;
mod image_io;
mod manifest;

pub use dataset::{load_dataset_manifest, BoundingBox, Sample};
pub use image_io::{load_image, load_image_raw};
pub use manifest::{load_model, save_model, MODEL_FILE, WEIGHTS_FILE};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().rank() != 2 {
            return Err(Error::Model(format!(
                "dense weight must be [out, in], got {}",
                weight.shape()
            )));
        }
        let out = weight.dims()[0];
        if let Some(b) = &bias {
            if b.dims() != [out] {
                return Err(Error::Model(format!(
                    "dense bias must be [{out}], got {}",
                    b.shape()
                )));
            }
        }
        Ok(Dense { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// 2-D convolution with square stride and symmetric zero padding.
/// Weight layout `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape().rank() != 4 {
            return Err(Error::Model(format!(
                "conv weight must be [out_ch, in_ch, kh, kw], got {}",
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Model("conv stride must be at least 1".into()));
        }
        let out = weight.dims()[0];
        if let Some(b) = &bias {
            if b.dims() != [out] {
                return Err(Error::Model(format!(
                    "conv bias must be [{out}], got {}",
                    b.shape()
                )));
            }
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Square pooling window without padding; partial windows are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl Pool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    GlobalAvgPool,
    Flatten,
}

impl Layer {
    /// Name used in manifests and summaries.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "Dense",
            Layer::Conv2d(_) => "Conv2D",
            Layer::Relu => "ReLU",
            Layer::MaxPool2d(_) => "MaxPool2D",
            Layer::AvgPool2d(_) => "AvgPool2D",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::Flatten => "Flatten",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.len() + d.bias.as_ref().map_or(0, Tensor::len),
            Layer::Conv2d(c) => c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len),
            _ => 0,
        }
    }

    /// Output shape for `input`, or a message naming the incompatibility.
    pub fn output_shape(&self, input: &Shape) -> std::result::Result<Shape, String> {
        let dims = input.dims();
        let shape = |d: Vec<usize>| Shape::new(d).map_err(|e| e.to_string());
        match self {
            Layer::Dense(d) => {
                if dims != [d.in_features()] {
                    return Err(format!(
                        "weight shape {} does not accept input {input}",
                        d.weight.shape()
                    ));
                }
                shape(vec![d.out_features()])
            }
            Layer::Conv2d(c) => {
                let &[ch, h, w] = dims else {
                    return Err(format!("conv expects [C,H,W] input, got {input}"));
                };
                if ch != c.in_channels() {
                    return Err(format!(
                        "weight shape {} does not accept input {input}",
                        c.weight.shape()
                    ));
                }
                let (oh, ow) = c
                    .output_hw(h, w)
                    .ok_or_else(|| format!("kernel larger than padded input {input}"))?;
                shape(vec![c.out_channels(), oh, ow])
            }
            Layer::Relu => Ok(input.clone()),
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                let &[ch, h, w] = dims else {
                    return Err(format!("pooling expects [C,H,W] input, got {input}"));
                };
                let (oh, ow) = p
                    .output_hw(h, w)
                    .ok_or_else(|| format!("pool window {p:?} does not fit input {input}"))?;
                shape(vec![ch, oh, ow])
            }
            Layer::GlobalAvgPool => {
                let &[ch, _, _] = dims else {
                    return Err(format!("global pooling expects [C,H,W] input, got {input}"));
                };
                shape(vec![ch])
            }
            Layer::Flatten => shape(vec![input.numel()]),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }
}

/// Input normalization applied by [`load_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Target (height, width).
    pub resize: (usize, usize),
}

impl Preprocessing {
    /// Mean/std for channel `c`; single-entry vectors broadcast.
    pub fn channel_stats(&self, c: usize) -> (f32, f32) {
        let pick = |v: &[f32]| if v.len() == 1 { v[0] } else { v[c] };
        (pick(&self.mean), pick(&self.std))
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [("mean", &self.mean), ("std", &self.std)] {
            if v.len() != 1 && v.len() != channels {
                return Err(Error::Model(format!(
                    "preprocessing {name} has {} entries, expected 1 or {channels}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("preprocessing {name} is not finite")));
            }
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Model("preprocessing std must be positive".into()));
        }
        if self.resize.0 == 0 || self.resize.1 == 0 {
            return Err(Error::Model("preprocessing resize must be at least 1x1".into()));
        }
        Ok(())
    }
}

/// Validated, immutable sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Shape,
    layers: Vec<Layer>,
    class_names: Vec<String>,
    preprocessing: Preprocessing,
    /// `shapes[l]` is the input shape of layer `l`; the last entry is the logits shape.
    shapes: Vec<Shape>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Shape,
        layers: Vec<Layer>,
        class_names: Vec<String>,
        preprocessing: Preprocessing,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        if class_names.is_empty() {
            return Err(Error::Model("model has no class names".into()));
        }
        let channels = if input_shape.rank() == 3 {
            input_shape.dims()[0]
        } else {
            1
        };
        preprocessing.validate(channels)?;
        if input_shape.rank() == 3 {
            let hw = (input_shape.dims()[1], input_shape.dims()[2]);
            if preprocessing.resize != hw {
                return Err(Error::Model(format!(
                    "preprocessing resize {:?} does not match input shape {input_shape}",
                    preprocessing.resize
                )));
            }
        }

        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (k, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(&shapes[k])
                .map_err(|msg| Error::Model(format!("layer {k} {msg}")))?;
            shapes.push(next);
        }
        if matches!(layers.last(), Some(Layer::Relu)) {
            return Err(Error::Model(
                "activation after the final linear layer: classification layer must be excluded".into(),
            ));
        }
        let out = shapes.last().expect("non-empty");
        if out.dims() != [class_names.len()] {
            return Err(Error::Model(format!(
                "model output {out} does not match {} class names",
                class_names.len()
            )));
        }
        Ok(ModelGraph {
            input_shape,
            layers,
            class_names,
            preprocessing,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    /// Input shape of layer `l`; `layer_shape(layers().len())` is the logits shape.
    pub fn layer_shape(&self, l: usize) -> &Shape {
        &self.shapes[l]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// True when no Dense/Conv layer carries a bias.
    pub fn is_bias_free(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Dense(d) => d.bias.is_none(),
            Layer::Conv2d(c) => c.bias.is_none(),
            _ => true,
        })
    }

    pub fn check_class(&self, index: usize) -> Result<()> {
        if index >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                index,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}
