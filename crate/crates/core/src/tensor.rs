//! Dense row-major `f32` tensors.
//!
//! Storage is 32-bit; every reduction in the crate accumulates in 64-bit.

use std::fmt;

use crate::error::{Error, Result};

/// Ordered list of positive dimensions.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Shape("shape must have at least one dimension".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension {pos} of {dims:?} is zero")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "shape {shape} holds {} elements but {} were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor from raw dimensions.
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Builds a tensor by rounding 64-bit values to storage precision.
    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape with identical element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// Sum of all elements, accumulated left to right in row-major order in `f64`.
pub fn sum_all(t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    Ok(t.data.iter().fold(0.0f64, |acc, &v| acc + v as f64))
}

/// Splits `t` into its strictly positive and strictly negative parts.
///
/// Zeros land in neither part's nonzero support, so `pos + neg == t` exactly.
pub fn split_pos_neg(t: &Tensor) -> (Tensor, Tensor) {
    let pos = t.map(|v| if v > 0.0 { v } else { 0.0 });
    let neg = t.map(|v| if v < 0.0 { v } else { 0.0 });
    (pos, neg)
}

/// Corner-aligned bilinear resampling of a 2-D map.
///
/// Output row `i` samples source row `i * (H - 1) / (out_h - 1)`; a length-1
/// output axis samples the source center.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = match t.dims() {
        &[h, w] => [h, w],
        dims => {
            return Err(Error::Shape(format!(
                "bilinear_resize expects a 2-D map, got {dims:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be at least 1x1"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }

    let rows = sample_positions(h, out_h);
    let cols = sample_positions(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let p00 = src[y0 * w + x0] as f64;
            let p01 = src[y0 * w + x1] as f64;
            let p10 = src[y1 * w + x0] as f64;
            let p11 = src[y1 * w + x1] as f64;
            let top = p00 + (p01 - p00) * fx;
            let bottom = p10 + (p11 - p10) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// (lower index, upper index, fraction toward upper) per output position.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                (src - 1) as f64 / 2.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
