//! Forward pass with full activation recording.

use crate::error::{Error, Result};
use crate::model_io::{Conv2d, Dense, Layer, ModelGraph, Pool2d};
use crate::tensor::Tensor;

/// Everything one backward decomposition needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `inputs[l]` is the input of layer `l`; the final entry is the logits.
    inputs: Vec<Tensor>,
    /// For each MaxPool layer, the flat input index that won each output element.
    maxpool_argmax: Vec<Option<Vec<usize>>>,
}

impl ActivationTrace {
    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.inputs[l]
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn output(&self) -> &Tensor {
        self.inputs.last().expect("trace has at least one entry")
    }

    pub fn argmax(&self, l: usize) -> Option<&[usize]> {
        self.maxpool_argmax.get(l).and_then(|a| a.as_deref())
    }

    pub fn num_layers(&self) -> usize {
        self.inputs.len() - 1
    }
}

/// Runs `model` on `input`, returning the logits and the recorded trace.
pub fn forward(model: &ModelGraph, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input {} does not match model input {}",
            input.shape(),
            model.input_shape()
        )));
    }
    if input.first_non_finite().is_some() {
        return Err(Error::InvalidArgument("input contains non-finite values".into()));
    }

    let n = model.layers().len();
    let mut inputs = Vec::with_capacity(n + 1);
    let mut maxpool_argmax = Vec::with_capacity(n);
    inputs.push(input.clone());
    for (l, layer) in model.layers().iter().enumerate() {
        let x = &inputs[l];
        let out_shape = model.layer_shape(l + 1).clone();
        let mut argmax = None;
        let y = match layer {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv_forward(c, x, out_shape.dims()),
            Layer::Relu => x.map(|v| v.max(0.0)).into_data(),
            Layer::MaxPool2d(p) => {
                let (y, idx) = maxpool_forward(p, x, out_shape.dims());
                argmax = Some(idx);
                y
            }
            Layer::AvgPool2d(p) => avgpool_forward(p, x, out_shape.dims()),
            Layer::GlobalAvgPool => global_avg_forward(x),
            Layer::Flatten => x.data().to_vec(),
        };
        let y = Tensor::new(out_shape, y)?;
        if y.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                layer: l,
                kind: layer.kind_name(),
            });
        }
        inputs.push(y);
        maxpool_argmax.push(argmax);
    }
    let trace = ActivationTrace {
        inputs,
        maxpool_argmax,
    };
    Ok((trace.output().clone(), trace))
}

/// Argmax of the logits; ties go to the lowest index.
pub fn predict(model: &ModelGraph, input: &Tensor) -> Result<(usize, f32)> {
    let (logits, _) = forward(model, input)?;
    Ok(argmax(&logits))
}

pub fn argmax(logits: &Tensor) -> (usize, f32) {
    let mut best = (0, logits.data()[0]);
    for (i, &v) in logits.data().iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn dense_forward(d: &Dense, x: &Tensor) -> Vec<f32> {
    let n_in = d.in_features();
    let w = d.weight.data();
    (0..d.out_features())
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = d.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
            for (wi, xi) in row.iter().zip(x.data()) {
                acc += *wi as f64 * *xi as f64;
            }
            acc as f32
        })
        .collect()
}

fn conv_forward(c: &Conv2d, x: &Tensor, out_dims: &[usize]) -> Vec<f32> {
    let &[in_ch, h, w] = x.dims() else {
        unreachable!("validated")
    };
    let (kh, kw) = c.kernel();
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let (stride, pad) = (c.stride as isize, c.padding as isize);
    let xs = x.data();
    let ws = c.weight.data();
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for oc in 0..c.out_channels() {
        let bias = c.bias.as_ref().map_or(0.0, |b| b.data()[oc] as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ic in 0..in_ch {
                    for ky in 0..kh {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = (ic * h + iy as usize) * w;
                        let w_row = ((oc * in_ch + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += ws[w_row + kx] as f64 * xs[x_row + ix as usize] as f64;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

fn maxpool_forward(p: &Pool2d, x: &Tensor, out_dims: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let &[ch, h, w] = x.dims() else {
        unreachable!("validated")
    };
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let xs = x.data();
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut idx = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = (c * h + oy * p.stride) * w + ox * p.stride;
                let mut best = xs[best_i];
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        let i = (c * h + oy * p.stride + ky) * w + ox * p.stride + kx;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

fn avgpool_forward(p: &Pool2d, x: &Tensor, out_dims: &[usize]) -> Vec<f32> {
    let &[ch, h, w] = x.dims() else {
        unreachable!("validated")
    };
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let xs = x.data();
    let area = (p.kernel * p.kernel) as f64;
    let mut out = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        acc += xs[(c * h + oy * p.stride + ky) * w + ox * p.stride + kx] as f64;
                    }
                }
                out.push((acc / area) as f32);
            }
        }
    }
    out
}

fn global_avg_forward(x: &Tensor) -> Vec<f32> {
    let &[_, h, w] = x.dims() else {
        unreachable!("validated")
    };
    x.data()
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect()
}
