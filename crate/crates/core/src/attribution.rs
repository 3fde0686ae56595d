//! Backward relevance decomposition: LRP-αβ, RAP, and CAM.
//!
//! Relevance starts at the target logit and is redistributed layer by layer
//! down to the input. Linear layers split each upper unit's relevance over
//! its inputs in proportion to their contributions `z_ij = m_i * w_ij`;
//! ReLU passes relevance through, MaxPool routes it to the recorded winner,
//! and Flatten reshapes it. Biases never enter a denominator unless
//! [`PropagationConfig::bias_in_denominator`] is set, and they never receive
//! relevance.
//!
//! A zero denominator means the corresponding path carries nothing (`0/0 := 0`).

use std::fmt;

use log::debug;

use crate::error::{Error, Result};
use crate::forward::ActivationTrace;
use crate::model_io::{Conv2d, Dense, Layer, ModelGraph, Pool2d};
use crate::tensor::{bilinear_resize, sum_all, Shape, Tensor};

/// Attribution method selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Lrp { alpha: f64, beta: f64 },
    Rap,
    Cam,
}

impl Method {
    pub const LRP_DEFAULT: Method = Method::Lrp {
        alpha: 1.0,
        beta: 0.0,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lrp { .. } => "lrp",
            Method::Rap => "rap",
            Method::Cam => "cam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Numerical switches shared by the LRP and RAP linear rules.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PropagationConfig {
    /// Add the bias to the matching-sign contribution sum. The bias's share
    /// is discarded, so relevance is no longer conserved.
    pub bias_in_denominator: bool,
    /// Stabilizer added to positive sums and subtracted from negative ones.
    pub epsilon: Option<f64>,
}

impl PropagationConfig {
    /// The stabilizer value used when one is enabled without an explicit value.
    pub const DEFAULT_EPSILON: f64 = 1e-9;
}

/// Per-layer relevance, ordered output → input.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    per_layer: Vec<Tensor>,
    method: Method,
    target: usize,
    output_value: f32,
}

impl RelevanceMap {
    /// `per_layer()[0]` is the output relevance; the last entry is input-shaped.
    pub fn per_layer(&self) -> &[Tensor] {
        &self.per_layer
    }

    /// Relevance at the input of layer `l` (trace numbering).
    pub fn at_layer_input(&self, l: usize) -> &Tensor {
        &self.per_layer[self.per_layer.len() - 1 - l]
    }

    pub fn input_relevance(&self) -> &Tensor {
        self.per_layer.last().expect("non-empty")
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// The decomposed logit `f(x)_target`.
    pub fn output_value(&self) -> f32 {
        self.output_value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationReport {
    /// Sum of relevance at each trace entry, ordered output → input.
    pub per_layer_sums: Vec<f64>,
    pub output_value: f64,
    /// `max_l |sum_l - output_value| / max(|output_value|, eps)`
    pub max_relative_drift: f64,
}

const DRIFT_FLOOR: f64 = 1e-12;

pub fn conservation_report(rmap: &RelevanceMap) -> ConservationReport {
    let per_layer_sums: Vec<f64> = rmap
        .per_layer
        .iter()
        .map(|t| sum_all(t).expect("relevance tensors are non-empty"))
        .collect();
    let output_value = rmap.output_value as f64;
    let scale = output_value.abs().max(DRIFT_FLOOR);
    let max_relative_drift = per_layer_sums
        .iter()
        .map(|s| (s - output_value).abs() / scale)
        .fold(0.0, f64::max);
    ConservationReport {
        per_layer_sums,
        output_value,
        max_relative_drift,
    }
}

// ---------------------------------------------------------------------------
// Linear views: every layer that is a fixed linear map, enumerated one upper
// unit at a time as (input index, contribution z_ij).

#[derive(Clone, Copy)]
enum LinearOp<'a> {
    Dense(&'a Dense),
    Conv(&'a Conv2d),
    AvgPool(Pool2d),
    GlobalAvg,
}

impl<'a> LinearOp<'a> {
    fn of(layer: &'a Layer) -> Option<Self> {
        match layer {
            Layer::Dense(d) => Some(LinearOp::Dense(d)),
            Layer::Conv2d(c) => Some(LinearOp::Conv(c)),
            Layer::AvgPool2d(p) => Some(LinearOp::AvgPool(*p)),
            Layer::GlobalAvgPool => Some(LinearOp::GlobalAvg),
            _ => None,
        }
    }

    /// Calls `f(j, terms, bias_j)` for every output unit `j` in row-major
    /// order, with `terms` listing `(i, z_ij)` in row-major input order.
    fn for_each_unit(&self, x: &Tensor, out: &Shape, mut f: impl FnMut(usize, &[(usize, f64)], f64)) {
        let xs = x.data();
        let mut terms: Vec<(usize, f64)> = Vec::new();
        match *self {
            LinearOp::Dense(d) => {
                let n_in = d.in_features();
                let w = d.weight.data();
                for j in 0..d.out_features() {
                    terms.clear();
                    let row = &w[j * n_in..(j + 1) * n_in];
                    terms.extend(
                        row.iter()
                            .zip(xs)
                            .enumerate()
                            .map(|(i, (&wi, &xi))| (i, xi as f64 * wi as f64)),
                    );
                    let b = d.bias.as_ref().map_or(0.0, |b| b.data()[j] as f64);
                    f(j, &terms, b);
                }
            }
            LinearOp::Conv(c) => {
                let &[in_ch, h, w] = x.dims() else {
                    unreachable!("validated")
                };
                let (kh, kw) = c.kernel();
                let (oh, ow) = (out.dims()[1], out.dims()[2]);
                let (stride, pad) = (c.stride as isize, c.padding as isize);
                let ws = c.weight.data();
                let mut j = 0;
                for oc in 0..c.out_channels() {
                    let b = c.bias.as_ref().map_or(0.0, |b| b.data()[oc] as f64);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            terms.clear();
                            for ic in 0..in_ch {
                                for ky in 0..kh {
                                    let iy = oy as isize * stride + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = ox as isize * stride + kx as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let i = (ic * h + iy as usize) * w + ix as usize;
                                        let wv = ws[((oc * in_ch + ic) * kh + ky) * kw + kx];
                                        terms.push((i, xs[i] as f64 * wv as f64));
                                    }
                                }
                            }
                            f(j, &terms, b);
                            j += 1;
                        }
                    }
                }
            }
            LinearOp::AvgPool(p) => {
                let &[ch, h, w] = x.dims() else {
                    unreachable!("validated")
                };
                let (oh, ow) = (out.dims()[1], out.dims()[2]);
                let scale = 1.0 / (p.kernel * p.kernel) as f64;
                let mut j = 0;
                for c in 0..ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            terms.clear();
                            for ky in 0..p.kernel {
                                for kx in 0..p.kernel {
                                    let i = (c * h + oy * p.stride + ky) * w + ox * p.stride + kx;
                                    terms.push((i, xs[i] as f64 * scale));
                                }
                            }
                            f(j, &terms, 0.0);
                            j += 1;
                        }
                    }
                }
            }
            LinearOp::GlobalAvg => {
                let &[ch, h, w] = x.dims() else {
                    unreachable!("validated")
                };
                let plane = h * w;
                let scale = 1.0 / plane as f64;
                for c in 0..ch {
                    terms.clear();
                    terms.extend((c * plane..(c + 1) * plane).map(|i| (i, xs[i] as f64 * scale)));
                    f(c, &terms, 0.0);
                }
            }
        }
    }
}

/// `z / s`, with `0/0` and any zero denominator mapped to 0.
#[inline]
fn ratio(z: f64, s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        z / s
    }
}

struct Denominators {
    pos: f64,
    neg: f64,
    abs_pos: f64,
    abs_neg: f64,
}

fn denominators(terms: &[(usize, f64)], bias: f64, cfg: &PropagationConfig) -> Denominators {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for &(_, z) in terms {
        if z > 0.0 {
            pos += z;
        } else if z < 0.0 {
            neg += z;
        }
    }
    let (abs_pos, abs_neg) = (pos, -neg);
    if cfg.bias_in_denominator {
        if bias > 0.0 {
            pos += bias;
        } else if bias < 0.0 {
            neg += bias;
        }
    }
    if let Some(eps) = cfg.epsilon {
        pos += eps;
        neg -= eps;
    }
    Denominators {
        pos,
        neg,
        abs_pos,
        abs_neg,
    }
}

/// LRP-αβ through one linear layer.
fn lrp_linear(
    op: LinearOp,
    x: &Tensor,
    upper: &Tensor,
    alpha: f64,
    beta: f64,
    cfg: &PropagationConfig,
) -> Tensor {
    let r_up = upper.data();
    let mut acc = vec![0.0f64; x.len()];
    op.for_each_unit(x, upper.shape(), |j, terms, bias| {
        let r = r_up[j] as f64;
        if r == 0.0 {
            return;
        }
        let d = denominators(terms, bias, cfg);
        for &(i, z) in terms {
            let (zp, zn) = if z > 0.0 { (z, 0.0) } else { (0.0, z) };
            acc[i] += alpha * ratio(zp, d.pos) * r - beta * ratio(zn, d.neg) * r;
        }
    });
    Tensor::from_f64(x.shape().clone(), &acc).expect("input-shaped")
}

/// Relevance through a layer that has no contribution-weighted rule.
fn passthrough(layer: &Layer, l: usize, trace: &ActivationTrace, upper: &Tensor) -> Tensor {
    let x = trace.layer_input(l);
    match layer {
        Layer::Relu => upper.clone(),
        Layer::Flatten => upper.reshape(x.shape().clone()).expect("flatten preserves numel"),
        Layer::MaxPool2d(_) => {
            let idx = trace.argmax(l).expect("maxpool records argmax");
            let mut acc = vec![0.0f64; x.len()];
            for (&i, &r) in idx.iter().zip(upper.data()) {
                acc[i] += r as f64;
            }
            Tensor::from_f64(x.shape().clone(), &acc).expect("input-shaped")
        }
        _ => unreachable!("linear layers handled by callers"),
    }
}

fn check_trace(model: &ModelGraph, trace: &ActivationTrace, target: usize) -> Result<()> {
    model.check_class(target)?;
    if trace.num_layers() != model.layers().len() {
        return Err(Error::InvalidArgument(format!(
            "trace has {} layers, model has {}",
            trace.num_layers(),
            model.layers().len()
        )));
    }
    Ok(())
}

fn output_relevance(trace: &ActivationTrace, target: usize) -> (Tensor, f32) {
    let logits = trace.output();
    let value = logits.data()[target];
    let mut r = Tensor::zeros(logits.shape().clone());
    r.data_mut()[target] = value;
    (r, value)
}

/// LRP-αβ with default numerics.
/// Rejects LRP parameters unless both are finite and `alpha - beta = 1`.
pub fn check_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    if !alpha.is_finite() || !beta.is_finite() || (alpha - beta - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "LRP requires alpha - beta = 1, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

pub fn lrp_backward(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
    alpha: f64,
    beta: f64,
) -> Result<RelevanceMap> {
    lrp_backward_with(model, trace, target, alpha, beta, &PropagationConfig::default())
}

pub fn lrp_backward_with(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
    alpha: f64,
    beta: f64,
    cfg: &PropagationConfig,
) -> Result<RelevanceMap> {
    check_alpha_beta(alpha, beta)?;
    check_trace(model, trace, target)?;
    let (mut r, output_value) = output_relevance(trace, target);
    let mut per_layer = vec![r.clone()];
    for (l, layer) in model.layers().iter().enumerate().rev() {
        let x = trace.layer_input(l);
        r = match LinearOp::of(layer) {
            Some(op) => lrp_linear(op, x, &r, alpha, beta, cfg),
            None => passthrough(layer, l, trace, &r),
        };
        per_layer.push(r.clone());
    }
    Ok(RelevanceMap {
        per_layer,
        method: Method::Lrp { alpha, beta },
        target,
        output_value,
    })
}

// ---------------------------------------------------------------------------
// RAP

/// Absolute influence normalization at the input of the final Dense layer.
///
/// Each penultimate unit first takes relevance proportional to its signed
/// contribution to the target logit, scaled so the total equals the logit;
/// the magnitudes are then rescaled by `sum(R) / sum(|R|)`, leaving every
/// unit with the sign of the logit.
pub fn rap_normalize_penultimate(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
) -> Result<Tensor> {
    check_trace(model, trace, target)?;
    let last = model.layers().len() - 1;
    let Layer::Dense(dense) = &model.layers()[last] else {
        return Err(Error::Model("RAP requires the final layer to be Dense".into()));
    };
    let x = trace.layer_input(last);
    let f_target = trace.output().data()[target] as f64;
    let n_in = dense.in_features();
    let row = &dense.weight.data()[target * n_in..(target + 1) * n_in];

    let z: Vec<f64> = x
        .data()
        .iter()
        .zip(row)
        .map(|(&m, &w)| m as f64 * w as f64)
        .collect();
    let z_sum: f64 = z.iter().sum();
    let signed: Vec<f64> = z.iter().map(|&zi| ratio(zi, z_sum) * f_target).collect();

    let total: f64 = signed.iter().sum();
    let abs_total: f64 = signed.iter().map(|v| v.abs()).sum();
    if abs_total == 0.0 {
        debug!("RAP normalization: all penultimate contributions are zero");
        return Ok(Tensor::zeros(x.shape().clone()));
    }
    let scale = total / abs_total;
    let normalized: Vec<f64> = signed.iter().map(|v| v.abs() * scale).collect();
    Tensor::from_f64(x.shape().clone(), &normalized)
}

/// RAP propagation through one Dense/Conv layer before the uniform shift.
///
/// Returns `(R_bar, R_neg_path)`: the full redistributed relevance and the
/// part of it that travelled through negative contributions. The positive
/// path carries `R_j` in `z+` proportions; the negative path carries
/// `R_j * sum|z-| / sum(|z+| + |z-|)` in `z-` proportions.
pub fn rap_layer_backward(layer: &Layer, input: &Tensor, upper: &Tensor) -> Result<(Tensor, Tensor)> {
    rap_layer_backward_with(layer, input, upper, &PropagationConfig::default())
}

pub fn rap_layer_backward_with(
    layer: &Layer,
    input: &Tensor,
    upper: &Tensor,
    cfg: &PropagationConfig,
) -> Result<(Tensor, Tensor)> {
    let op = match layer {
        Layer::Dense(_) | Layer::Conv2d(_) => LinearOp::of(layer).expect("linear"),
        other => {
            return Err(Error::InvalidArgument(format!(
                "RAP layer rule applies to Dense/Conv2D, not {}",
                other.kind_name()
            )))
        }
    };
    let out_shape = layer.output_shape(input.shape()).map_err(Error::Shape)?;
    if &out_shape != upper.shape() {
        return Err(Error::Shape(format!(
            "upper relevance {} does not match layer output {out_shape}",
            upper.shape()
        )));
    }

    let r_up = upper.data();
    let mut bar = vec![0.0f64; input.len()];
    let mut neg_path = vec![0.0f64; input.len()];
    op.for_each_unit(input, upper.shape(), |j, terms, bias| {
        let r = r_up[j] as f64;
        if r == 0.0 {
            return;
        }
        let d = denominators(terms, bias, cfg);
        let neg_share = ratio(d.abs_neg, d.abs_pos + d.abs_neg);
        for &(i, z) in terms {
            let (zp, zn) = if z > 0.0 { (z, 0.0) } else { (0.0, z) };
            let pos = ratio(zp, d.pos) * r;
            let neg = ratio(zn, d.neg) * (r * neg_share);
            bar[i] += pos + neg;
            neg_path[i] += neg;
        }
    });
    Ok((
        Tensor::from_f64(input.shape().clone(), &bar)?,
        Tensor::from_f64(input.shape().clone(), &neg_path)?,
    ))
}

/// Per-unit shift `Ψ_i`: the negative-path total spread evenly over the
/// strictly activated units, zero elsewhere. `None` when no unit is active.
pub fn uniform_shift_values(r_neg_path: &Tensor, activations: &Tensor) -> Result<Option<Vec<f64>>> {
    if r_neg_path.shape() != activations.shape() {
        return Err(Error::Shape(format!(
            "negative-path relevance {} vs activations {}",
            r_neg_path.shape(),
            activations.shape()
        )));
    }
    let active = activations.data().iter().filter(|&&m| m > 0.0).count();
    if active == 0 {
        return Ok(None);
    }
    let total = sum_all(r_neg_path)?;
    let per_unit = total / active as f64;
    Ok(Some(
        activations
            .data()
            .iter()
            .map(|&m| if m > 0.0 { per_unit } else { 0.0 })
            .collect(),
    ))
}

/// `R = R_bar - Ψ`. With no activated unit the shift is skipped.
pub fn rap_uniform_shift(r_bar: &Tensor, r_neg_path: &Tensor, activations: &Tensor) -> Result<Tensor> {
    if r_bar.shape() != activations.shape() {
        return Err(Error::Shape(format!(
            "relevance {} vs activations {}",
            r_bar.shape(),
            activations.shape()
        )));
    }
    let Some(psi) = uniform_shift_values(r_neg_path, activations)? else {
        debug!("RAP shift skipped: no activated units");
        return Ok(r_bar.clone());
    };
    let shifted: Vec<f64> = r_bar
        .data()
        .iter()
        .zip(&psi)
        .map(|(&r, &p)| r as f64 - p)
        .collect();
    Tensor::from_f64(r_bar.shape().clone(), &shifted)
}

pub fn rap_backward(model: &ModelGraph, trace: &ActivationTrace, target: usize) -> Result<RelevanceMap> {
    rap_backward_with(model, trace, target, &PropagationConfig::default())
}

pub fn rap_backward_with(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
    cfg: &PropagationConfig,
) -> Result<RelevanceMap> {
    let penultimate = rap_normalize_penultimate(model, trace, target)?;
    let (out, output_value) = output_relevance(trace, target);
    let mut per_layer = vec![out, penultimate.clone()];
    let mut r = penultimate;
    let last = model.layers().len() - 1;
    for (l, layer) in model.layers()[..last].iter().enumerate().rev() {
        let x = trace.layer_input(l);
        r = match layer {
            Layer::Dense(_) | Layer::Conv2d(_) => {
                let (bar, neg) = rap_layer_backward_with(layer, x, &r, cfg)?;
                rap_uniform_shift(&bar, &neg, x)?
            }
            Layer::AvgPool2d(_) | Layer::GlobalAvgPool => {
                lrp_linear(LinearOp::of(layer).expect("linear"), x, &r, 1.0, 0.0, cfg)
            }
            _ => passthrough(layer, l, trace, &r),
        };
        per_layer.push(r.clone());
    }
    Ok(RelevanceMap {
        per_layer,
        method: Method::Rap,
        target,
        output_value,
    })
}

// ---------------------------------------------------------------------------
// CAM

/// Locates the GAP → [Flatten] → final Dense tail; returns the GAP index.
fn cam_head(model: &ModelGraph) -> Result<usize> {
    let layers = model.layers();
    let last = layers.len() - 1;
    if !matches!(layers[last], Layer::Dense(_)) {
        return Err(Error::CamRequiresGapHead("final layer is not Dense".into()));
    }
    let mut k = last;
    while k > 0 && matches!(layers[k - 1], Layer::Flatten) {
        k -= 1;
    }
    if k == 0 || !matches!(layers[k - 1], Layer::GlobalAvgPool) {
        return Err(Error::CamRequiresGapHead(
            "final Dense is not fed by GlobalAvgPool".into(),
        ));
    }
    let gap = k - 1;
    if !layers[..gap].iter().any(|l| matches!(l, Layer::Conv2d(_))) {
        return Err(Error::CamRequiresGapHead(
            "no convolution before GlobalAvgPool".into(),
        ));
    }
    Ok(gap)
}

/// Class activation map at the resolution of the last feature maps.
pub fn cam_feature_map(model: &ModelGraph, trace: &ActivationTrace, target: usize) -> Result<Tensor> {
    let gap = cam_head(model)?;
    check_trace(model, trace, target)?;
    let Layer::Dense(dense) = model.layers().last().expect("non-empty") else {
        unreachable!()
    };
    let features = trace.layer_input(gap);
    let &[k, h, w] = features.dims() else {
        unreachable!("validated")
    };
    let row = &dense.weight.data()[target * k..(target + 1) * k];
    let mut cam = vec![0.0f64; h * w];
    for (plane, &wk) in features.data().chunks(h * w).zip(row) {
        for (c, &f) in cam.iter_mut().zip(plane) {
            *c += wk as f64 * f as f64;
        }
    }
    Tensor::from_f64(Shape::new(vec![h, w])?, &cam)
}

/// Class activation map upsampled to the model input's `H x W`.
pub fn cam_heatmap(model: &ModelGraph, trace: &ActivationTrace, target: usize) -> Result<Tensor> {
    let raw = cam_feature_map(model, trace, target)?;
    let &[_, h, w] = model.input_shape().dims() else {
        return Err(Error::CamRequiresGapHead("model input is not [C,H,W]".into()));
    };
    bilinear_resize(&raw, h, w)
}

/// Input-frame attribution for any method: `[C,H,W]` relevance for LRP/RAP,
/// `[1,H,W]` for CAM.
pub fn attribute(
    model: &ModelGraph,
    trace: &ActivationTrace,
    target: usize,
    method: Method,
) -> Result<Tensor> {
    match method {
        Method::Lrp { alpha, beta } => Ok(lrp_backward(model, trace, target, alpha, beta)?
            .input_relevance()
            .clone()),
        Method::Rap => Ok(rap_backward(model, trace, target)?.input_relevance().clone()),
        Method::Cam => {
            let cam = cam_heatmap(model, trace, target)?;
            let mut dims = vec![1];
            dims.extend_from_slice(cam.dims());
            cam.reshape(Shape::new(dims)?)
        }
    }
}
