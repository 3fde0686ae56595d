//! Test support shared by the integration suites: seeded random networks and
//! straight nested-loop reference implementations that do not touch the
//! crate's propagation code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprop::{Conv2d, Dense, Layer, ModelGraph, Pool2d, Preprocessing, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pre_for(input: &[usize]) -> Preprocessing {
    let resize = if input.len() == 3 {
        (input[1], input[2])
    } else {
        (1, 1)
    };
    Preprocessing {
        mean: vec![0.0],
        std: vec![1.0],
        resize,
    }
}

pub fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Dense weights as plain nested vectors, `[out][in]`.
pub type DenseWeights = Vec<Vec<f64>>;

/// Dense → ReLU → … → Dense, without biases. `widths[0]` is the input size.
pub fn dense_net(widths: &[usize], weights: &[DenseWeights]) -> ModelGraph {
    let mut layers = Vec::new();
    for (k, w) in weights.iter().enumerate() {
        let flat: Vec<f32> = w.iter().flatten().map(|&v| v as f32).collect();
        let t = Tensor::from_vec(&[widths[k + 1], widths[k]], flat).unwrap();
        layers.push(Layer::Dense(Dense::new(t, None).unwrap()));
        if k + 1 < weights.len() {
            layers.push(Layer::Relu);
        }
    }
    ModelGraph::new(
        Shape::new(vec![widths[0]]).unwrap(),
        layers,
        classes(*widths.last().unwrap()),
        pre_for(&[widths[0]]),
    )
    .unwrap()
}

/// Random bias-free dense net: `depth` weighted layers, widths in `2..=max_units`.
pub fn random_dense_weights(
    rng: &mut ChaCha8Rng,
    depth: usize,
    max_units: usize,
    nonneg: bool,
) -> (Vec<usize>, Vec<DenseWeights>) {
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=max_units)).collect();
    let weights = (0..depth)
        .map(|k| {
            let scale = 1.0 / (widths[k] as f64).sqrt();
            (0..widths[k + 1])
                .map(|_| {
                    (0..widths[k])
                        .map(|_| {
                            let v = rng.gen_range(-1.0..1.0) * scale * 1.5;
                            // Round through f32 so the oracle sees the stored weights.
                            (if nonneg { f64::abs(v) } else { v }) as f32 as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (widths, weights)
}

/// Random bias-free sequential CNN on an 8x8 input with up to 4 channels.
pub fn random_conv_net(rng: &mut ChaCha8Rng, nonneg: bool) -> ModelGraph {
    let in_ch = rng.gen_range(1..=3);
    let mid = rng.gen_range(2..=4);
    let n_classes = rng.gen_range(2..=4);
    let sign = |rng: &mut ChaCha8Rng, v: f32| {
        if nonneg {
            v.abs()
        } else {
            v * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
        }
    };
    let conv_w = |rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize| {
        let n = o * i * k * k;
        let scale = 1.0 / ((i * k * k) as f32).sqrt();
        let data = (0..n)
            .map(|_| {
                let v = rng.gen_range(0.0..1.5) * scale;
                sign(rng, v)
            })
            .collect();
        Tensor::from_vec(&[o, i, k, k], data).unwrap()
    };
    let mut layers = vec![
        Layer::Conv2d(Conv2d::new(conv_w(rng, mid, in_ch, 3), None, 1, 1).unwrap()),
        Layer::Relu,
    ];
    let mut hw = 8;
    match rng.gen_range(0..3) {
        0 => {
            layers.push(Layer::MaxPool2d(Pool2d { kernel: 2, stride: 2 }));
            hw = 4;
        }
        1 => {
            layers.push(Layer::AvgPool2d(Pool2d { kernel: 2, stride: 2 }));
            hw = 4;
        }
        _ => {}
    }
    let head_in;
    if rng.gen_bool(0.5) {
        layers.push(Layer::Conv2d(
            Conv2d::new(conv_w(rng, 4, mid, 3), None, 1, 1).unwrap(),
        ));
        layers.push(Layer::Relu);
        if rng.gen_bool(0.5) {
            layers.push(Layer::GlobalAvgPool);
            head_in = 4;
        } else {
            layers.push(Layer::Flatten);
            head_in = 4 * hw * hw;
        }
    } else {
        layers.push(Layer::Flatten);
        head_in = mid * hw * hw;
    }
    let scale = 1.0 / (head_in as f32).sqrt();
    let head: Vec<f32> = (0..n_classes * head_in)
        .map(|_| {
            let v = rng.gen_range(0.0..1.5) * scale;
            sign(rng, v)
        })
        .collect();
    layers.push(Layer::Dense(
        Dense::new(Tensor::from_vec(&[n_classes, head_in], head).unwrap(), None).unwrap(),
    ));
    let input = [in_ch, 8, 8];
    ModelGraph::new(
        Shape::new(input.to_vec()).unwrap(),
        layers,
        classes(n_classes),
        pre_for(&input),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Reference forward pass (direct loops, f64 throughout)

pub fn reference_forward(model: &ModelGraph, input: &Tensor) -> Vec<f64> {
    let mut dims = input.dims().to_vec();
    let mut x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                let (o, i) = (d.out_features(), d.in_features());
                let w = d.weight.data();
                x = (0..o)
                    .map(|r| {
                        let mut s = d.bias.as_ref().map_or(0.0, |b| b.data()[r] as f64);
                        for c in 0..i {
                            s += w[r * i + c] as f64 * x[c];
                        }
                        s
                    })
                    .collect();
                dims = vec![o];
            }
            Layer::Conv2d(c) => {
                let (ci, h, w) = (dims[0], dims[1], dims[2]);
                let (kh, kw) = c.kernel();
                let co = c.out_channels();
                let (p, s) = (c.padding as i64, c.stride as i64);
                let oh = ((h as i64 + 2 * p - kh as i64) / s + 1) as usize;
                let ow = ((w as i64 + 2 * p - kw as i64) / s + 1) as usize;
                let wt = c.weight.data();
                let mut out = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = c.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                            for i in 0..ci {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = y as i64 * s + ky as i64 - p;
                                        let ix = xx as i64 * s + kx as i64 - p;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                            acc += wt[((o * ci + i) * kh + ky) * kw + kx] as f64
                                                * x[(i * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            out[(o * oh + y) * ow + xx] = acc;
                        }
                    }
                }
                x = out;
                dims = vec![co, oh, ow];
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::MaxPool2d(pl) | Layer::AvgPool2d(pl) => {
                let is_max = matches!(layer, Layer::MaxPool2d(_));
                let (c, h, w) = (dims[0], dims[1], dims[2]);
                let oh = (h - pl.kernel) / pl.stride + 1;
                let ow = (w - pl.kernel) / pl.stride + 1;
                let mut out = Vec::new();
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let vals: Vec<f64> = (0..pl.kernel * pl.kernel)
                                .map(|k| {
                                    x[(ch * h + y * pl.stride + k / pl.kernel) * w
                                        + xx * pl.stride
                                        + k % pl.kernel]
                                })
                                .collect();
                            out.push(if is_max {
                                vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.iter().sum::<f64>() / vals.len() as f64
                            });
                        }
                    }
                }
                x = out;
                dims = vec![c, oh, ow];
            }
            Layer::GlobalAvgPool => {
                let plane = dims[1] * dims[2];
                x = x
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                dims = vec![dims[0]];
            }
            Layer::Flatten => dims = vec![x.len()],
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Reference decompositions for Dense/ReLU nets.
//
// `acts[k]` is the input to weighted layer k (post-ReLU for k > 0), and the
// last entry is the logits. Results are indexed the same way: `out[k]` is the
// relevance at the input of weighted layer k.

fn div0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

pub fn oracle_lrp(
    weights: &[DenseWeights],
    acts: &[Vec<f64>],
    target: usize,
    alpha: f64,
    beta: f64,
) -> Vec<Vec<f64>> {
    let depth = weights.len();
    let mut upper = vec![0.0; acts[depth].len()];
    upper[target] = acts[depth][target];
    let mut out = vec![Vec::new(); depth];
    for k in (0..depth).rev() {
        let m = &acts[k];
        let w = &weights[k];
        let mut r = vec![0.0; m.len()];
        for j in 0..w.len() {
            let mut sp = 0.0;
            let mut sn = 0.0;
            for i in 0..m.len() {
                let z = m[i] * w[j][i];
                if z > 0.0 {
                    sp += z;
                }
                if z < 0.0 {
                    sn += z;
                }
            }
            for i in 0..m.len() {
                let z = m[i] * w[j][i];
                let zp = if z > 0.0 { z } else { 0.0 };
                let zn = if z < 0.0 { z } else { 0.0 };
                r[i] += (alpha * div0(zp, sp) - beta * div0(zn, sn)) * upper[j];
            }
        }
        out[k] = r.clone();
        upper = r;
    }
    out
}

pub fn oracle_rap(weights: &[DenseWeights], acts: &[Vec<f64>], target: usize) -> Vec<Vec<f64>> {
    let depth = weights.len();
    let fx = acts[depth][target];
    let mut out = vec![Vec::new(); depth];

    // Penultimate: signed contributions scaled to sum to f(x), then
    // R' = |R| * sum(R) / sum|R|.
    let m = &acts[depth - 1];
    let z: Vec<f64> = (0..m.len())
        .map(|i| m[i] * weights[depth - 1][target][i])
        .collect();
    let zs: f64 = z.iter().sum();
    let r: Vec<f64> = z.iter().map(|&zi| div0(zi, zs) * fx).collect();
    let s: f64 = r.iter().sum();
    let a: f64 = r.iter().map(|v| v.abs()).sum();
    let mut upper: Vec<f64> = r.iter().map(|v| v.abs() * div0(s, a)).collect();
    out[depth - 1] = upper.clone();

    for k in (0..depth - 1).rev() {
        let m = &acts[k];
        let w = &weights[k];
        let mut bar = vec![0.0; m.len()];
        let mut neg = vec![0.0; m.len()];
        for j in 0..w.len() {
            let (mut sp, mut sn) = (0.0, 0.0);
            for i in 0..m.len() {
                let z = m[i] * w[j][i];
                if z > 0.0 {
                    sp += z;
                } else {
                    sn += z;
                }
            }
            let share = div0(sn.abs(), sp.abs() + sn.abs());
            for i in 0..m.len() {
                let z = m[i] * w[j][i];
                if z > 0.0 {
                    bar[i] += div0(z, sp) * upper[j];
                } else if z < 0.0 {
                    let v = div0(z, sn) * (upper[j] * share);
                    bar[i] += v;
                    neg[i] += v;
                }
            }
        }
        let gamma = m.iter().filter(|&&v| v > 0.0).count();
        let total: f64 = neg.iter().sum();
        let r: Vec<f64> = (0..m.len())
            .map(|i| {
                if gamma > 0 && m[i] > 0.0 {
                    bar[i] - total / gamma as f64
                } else {
                    bar[i]
                }
            })
            .collect();
        out[k] = r.clone();
        upper = r;
    }
    out
}

/// Trace activations at each weighted layer's input, plus the logits.
pub fn dense_acts(trace: &relprop::ActivationTrace) -> Vec<Vec<f64>> {
    let n = trace.num_layers();
    let mut acts: Vec<Vec<f64>> = (0..n)
        .step_by(2)
        .map(|l| trace.layer_input(l).data().iter().map(|&v| v as f64).collect())
        .collect();
    acts.push(trace.output().data().iter().map(|&v| v as f64).collect());
    acts
}

pub fn max_abs(a: &[f64], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Frame and box used by the threshold-trend harness.
pub const TREND_FRAME: usize = 32;
pub const TREND_BOX: relprop::BoundingBox = relprop::BoundingBox {
    x: 12,
    y: 12,
    w: 8,
    h: 8,
};

fn trend_distance(y: usize, x: usize) -> f64 {
    let c = TREND_BOX.x as f64 + TREND_BOX.w as f64 / 2.0 - 0.5;
    ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt()
}

fn trend_heatmap(f: impl Fn(usize, usize) -> f64) -> relprop::Heatmap {
    let n = TREND_FRAME;
    let data = (0..n * n).map(|i| f(i / n, i % n) as f32).collect();
    let t = Tensor::from_vec(&[1, n, n], data).unwrap();
    relprop::postprocess_relevance(&t, relprop::Method::Cam).unwrap()
}

/// Wide low-level spread over the whole frame plus a bright plateau on the box.
pub fn diffuse_peak_heatmap() -> relprop::Heatmap {
    let b = TREND_BOX;
    trend_heatmap(|y, x| {
        let d = trend_distance(y, x);
        if x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h {
            0.6 + 0.4 * (-d * d / 8.0).exp()
        } else {
            0.55 * (-d * d / 200.0).exp()
        }
    })
}

/// Narrow Gaussian centered on the box.
pub fn concentrated_heatmap() -> relprop::Heatmap {
    trend_heatmap(|y, x| {
        let d = trend_distance(y, x);
        (-d * d / 18.0).exp()
    })
}

pub fn trend_ious(h: &relprop::Heatmap, thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| relprop::iou(&relprop::binarize(h, t).unwrap(), &[TREND_BOX]).unwrap())
        .collect()
}
