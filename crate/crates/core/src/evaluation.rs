//! Heatmap post-processing and the thresholded mean-IOU localization protocol.

use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use log::warn;
use rayon::prelude::*;

use crate::attribution::{attribute, Method};
use crate::error::{Error, Result};
use crate::forward::{argmax, forward};
use crate::model_io::{load_image, BoundingBox, ModelGraph, Sample};
use crate::tensor::{Shape, Tensor};

/// Channel-summed, negative-clamped, max-normalized relevance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Tensor,
    method: Method,
}

impl Heatmap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn height(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[1]
    }
}

pub fn postprocess_relevance(relevance: &Tensor, method: Method) -> Result<Heatmap> {
    let &[c, h, w] = relevance.dims() else {
        return Err(Error::Shape(format!(
            "heatmaps are built from [C,H,W] relevance, got {}",
            relevance.shape()
        )));
    };
    let plane = h * w;
    let mut summed = vec![0.0f64; plane];
    for ch in 0..c {
        for (acc, &v) in summed
            .iter_mut()
            .zip(&relevance.data()[ch * plane..(ch + 1) * plane])
        {
            *acc += v as f64;
        }
    }
    for v in &mut summed {
        *v = v.max(0.0);
    }
    let max = summed.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut summed {
            *v /= max;
        }
    }
    Ok(Heatmap {
        values: Tensor::from_f64(Shape::new(vec![h, w])?, &summed)?,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BitMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Keeps pixels strictly above `threshold`, which must lie in `[0, 1)`.
pub fn binarize(h: &Heatmap, threshold: f64) -> Result<BitMask> {
    check_threshold(threshold)?;
    let bits = h.values.data().iter().map(|&v| v as f64 > threshold).collect();
    BitMask::new(h.height(), h.width(), bits)
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1)")));
    }
    Ok(())
}

/// Intersection and union pixel counts of `mask` against the union of `boxes`.
pub fn overlap_counts(mask: &BitMask, boxes: &[BoundingBox]) -> Result<(usize, usize)> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("IOU needs at least one box".into()));
    }
    if let Some(b) = boxes.iter().find(|b| !b.fits(mask.height, mask.width)) {
        return Err(Error::InvalidArgument(format!(
            "box {b:?} outside the {}x{} mask frame",
            mask.height, mask.width
        )));
    }

    // Row-wise: merge box spans covering the row, count mask pixels inside
    // them with a prefix sum.
    let mut prefix = vec![0usize; mask.width + 1];
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(boxes.len());
    let (mut inter, mut mask_total, mut box_total) = (0, 0, 0);
    for y in 0..mask.height {
        let row = &mask.bits[y * mask.width..(y + 1) * mask.width];
        for (x, &b) in row.iter().enumerate() {
            prefix[x + 1] = prefix[x] + b as usize;
        }
        mask_total += prefix[mask.width];

        spans.clear();
        spans.extend(
            boxes
                .iter()
                .filter(|b| b.y <= y && y < b.y + b.h)
                .map(|b| (b.x, b.x + b.w)),
        );
        spans.sort_unstable();
        let mut cur: Option<(usize, usize)> = None;
        for &(s, e) in &spans {
            match cur {
                Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    box_total += ce - cs;
                    inter += prefix[ce] - prefix[cs];
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some((cs, ce)) = cur {
            box_total += ce - cs;
            inter += prefix[ce] - prefix[cs];
        }
    }
    Ok((inter, mask_total + box_total - inter))
}

/// `|mask ∩ B| / |mask ∪ B|` where `B` is the union of `boxes`; 0 when both are empty.
pub fn iou(mask: &BitMask, boxes: &[BoundingBox]) -> Result<f64> {
    let (inter, union) = overlap_counts(mask, boxes)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Which class each sample is decomposed toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// The sample's annotated class.
    #[default]
    Label,
    /// The model's argmax.
    Predicted,
    /// A fixed class index for every sample.
    Index(usize),
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub target: TargetMode,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub method: Method,
    pub class: String,
    pub threshold: f64,
    pub mean_iou: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Ordered by method (as requested), class (model order), threshold.
    pub cells: Vec<EvalCell>,
    pub methods: Vec<Method>,
    pub thresholds: Vec<f64>,
    pub skipped_without_boxes: usize,
    pub failures: Vec<(PathBuf, String)>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 5] = ["method", "class", "threshold", "mean_iou", "n_samples"];

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        for c in &self.cells {
            w.write_record([
                c.method.name().to_string(),
                c.class.clone(),
                c.threshold.to_string(),
                format!("{:.6}", c.mean_iou),
                c.n_samples.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Class-averaged mean IOU per method and threshold (rows follow
    /// `methods`, columns follow `thresholds`).
    pub fn summary_grid(&self) -> Vec<(Method, Vec<f64>)> {
        self.methods
            .iter()
            .map(|&m| {
                let row = self
                    .thresholds
                    .iter()
                    .map(|&t| {
                        let vals: Vec<f64> = self
                            .cells
                            .iter()
                            .filter(|c| c.method == m && c.threshold == t)
                            .map(|c| c.mean_iou)
                            .collect();
                        if vals.is_empty() {
                            f64::NAN
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        }
                    })
                    .collect();
                (m, row)
            })
            .collect()
    }

    pub fn cell(&self, method: Method, class: &str, threshold: f64) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.class == class && c.threshold == threshold)
    }
}

/// IOU of one sample per method per threshold.
type SampleScores = Vec<Vec<f64>>;

fn evaluate_sample(
    model: &ModelGraph,
    sample: &Sample,
    methods: &[Method],
    thresholds: &[f64],
    target: TargetMode,
) -> Result<(usize, SampleScores)> {
    let label = model.class_index(&sample.class_label).ok_or_else(|| {
        Error::InvalidArgument(format!("label `{}` is not a model class", sample.class_label))
    })?;
    let channels = model.input_shape().dims()[0];
    let input = load_image(&sample.image_path, model.preprocessing(), channels)?;
    let (logits, trace) = forward(model, &input)?;
    let target = match target {
        TargetMode::Label => label,
        TargetMode::Predicted => argmax(&logits).0,
        TargetMode::Index(i) => {
            model.check_class(i)?;
            i
        }
    };
    let mut scores = Vec::with_capacity(methods.len());
    for &m in methods {
        let relevance = attribute(model, &trace, target, m)?;
        let heat = postprocess_relevance(&relevance, m)?;
        let row = thresholds
            .iter()
            .map(|&t| iou(&binarize(&heat, t)?, &sample.boxes))
            .collect::<Result<Vec<_>>>()?;
        scores.push(row);
    }
    Ok((label, scores))
}

/// Runs every method on every boxed sample and aggregates mean IOU per
/// (method, class, threshold). Per-sample failures are recorded, not fatal.
pub fn evaluate_dataset(
    model: &ModelGraph,
    samples: &[Sample],
    methods: &[Method],
    thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no attribution methods given".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no thresholds given".into()));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    if model.input_shape().rank() != 3 {
        return Err(Error::Model(format!(
            "evaluation needs an image model, input is {}",
            model.input_shape()
        )));
    }
    if let TargetMode::Index(i) = opts.target {
        model.check_class(i)?;
    }

    let boxed: Vec<&Sample> = samples.iter().filter(|s| !s.boxes.is_empty()).collect();
    let skipped_without_boxes = samples.len() - boxed.len();
    let run = || -> Vec<Result<(usize, SampleScores)>> {
        boxed
            .par_iter()
            .map(|s| evaluate_sample(model, s, methods, thresholds, opts.target))
            .collect()
    };
    let results = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };

    // per (method, class, threshold): IOU values
    let n_cls = model.num_classes();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); methods.len() * n_cls * thresholds.len()];
    let slot = |m: usize, c: usize, t: usize| (m * n_cls + c) * thresholds.len() + t;
    let mut failures = Vec::new();
    for (sample, result) in boxed.iter().zip(results) {
        match result {
            Ok((class, scores)) => {
                for (m, row) in scores.iter().enumerate() {
                    for (t, &v) in row.iter().enumerate() {
                        buckets[slot(m, class, t)].push(v);
                    }
                }
            }
            Err(e) => {
                warn!("{}: {e}", sample.image_path.display());
                failures.push((sample.image_path.clone(), e.to_string()));
            }
        }
    }
    if failures.len() == boxed.len() {
        return Err(Error::NoEvaluableSamples);
    }

    let mut cells = Vec::new();
    for (m, &method) in methods.iter().enumerate() {
        for c in 0..n_cls {
            for (t, &threshold) in thresholds.iter().enumerate() {
                let vals = &mut buckets[slot(m, c, t)];
                if vals.is_empty() {
                    continue;
                }
                // Sorted summation makes the mean independent of sample order.
                vals.sort_by(f64::total_cmp);
                let mean_iou = vals.iter().sum::<f64>() / vals.len() as f64;
                cells.push(EvalCell {
                    method,
                    class: model.class_names()[c].clone(),
                    threshold,
                    mean_iou,
                    n_samples: vals.len(),
                });
            }
        }
    }
    Ok(EvalReport {
        cells,
        methods: methods.to_vec(),
        thresholds: thresholds.to_vec(),
        skipped_without_boxes,
        failures,
    })
}

const OVERLAY_HEAT_WEIGHT: f64 = 0.6;

/// Blue (0) → red (1) color for a heatmap value.
fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the heatmap as an 8-bit RGB PNG, optionally alpha-blended over a
/// `[C,H,W]` base image with values in `[0, 1]` (C = 1 or 3).
pub fn render_heatmap(h: &Heatmap, base_image: Option<&Tensor>, out_path: impl AsRef<Path>) -> Result<()> {
    let (height, width) = (h.height(), h.width());
    let plane = height * width;
    if let Some(base) = base_image {
        match base.dims() {
            &[c, bh, bw] if (c == 1 || c == 3) && (bh, bw) == (height, width) => {}
            _ => {
                return Err(Error::Shape(format!(
                    "overlay base {} does not match heatmap {height}x{width}",
                    base.shape()
                )))
            }
        }
    }
    let vals = h.values.data();
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let heat = heat_color(vals[i] as f64);
        let rgb = match base_image {
            None => heat,
            Some(base) => {
                let b = base.data();
                let px = if base.dims()[0] == 1 {
                    [b[i] as f64; 3]
                } else {
                    [b[i] as f64, b[plane + i] as f64, b[2 * plane + i] as f64]
                };
                let mut out = [0.0; 3];
                for k in 0..3 {
                    out[k] = OVERLAY_HEAT_WEIGHT * heat[k] + (1.0 - OVERLAY_HEAT_WEIGHT) * px[k];
                }
                out
            }
        };
        Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])])
    });
    let out_path = out_path.as_ref();
    img.save_with_format(out_path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: out_path.to_path_buf(),
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn heat(h: usize, w: usize, v: Vec<f32>) -> Heatmap {
        Heatmap {
            values: Tensor::from_vec(&[h, w], v).unwrap(),
            method: Method::Cam,
        }
    }

    fn bx(x: usize, y: usize, w: usize, h: usize) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    #[test]
    fn postprocess_clamps_after_channel_sum() {
        let r = Tensor::from_vec(&[2, 1, 1], vec![1.0, -3.0]).unwrap();
        let h = postprocess_relevance(&r, Method::Rap).unwrap();
        assert_eq!(h.values().data(), &[0.0]);
    }

    #[test]
    fn postprocess_max_normalizes() {
        let r = Tensor::from_vec(&[1, 1, 2], vec![2.0, 4.0]).unwrap();
        let h = postprocess_relevance(&r, Method::LRP_DEFAULT).unwrap();
        assert_eq!(h.values().data(), &[0.5, 1.0]);
        let again = postprocess_relevance(
            &h.values().reshape(Shape::new(vec![1, 1, 2]).unwrap()).unwrap(),
            Method::LRP_DEFAULT,
        )
        .unwrap();
        assert_eq!(again.values(), h.values());
    }

    #[test]
    fn binarize_boundaries() {
        let h = heat(2, 2, vec![0.5; 4]);
        assert_eq!(binarize(&h, 0.3).unwrap().count(), 4);
        assert_eq!(binarize(&h, 0.5).unwrap().count(), 0);
        let h = heat(1, 3, vec![0.0, 0.2, 1.0]);
        assert_eq!(binarize(&h, 0.0).unwrap().bits(), &[false, true, true]);
        assert!(binarize(&h, 1.0).is_err());
        assert!(binarize(&h, -0.1).is_err());
    }

    #[test]
    fn iou_examples() {
        let mut bits = vec![false; 64];
        for y in 2..5 {
            for x in 1..4 {
                bits[y * 8 + x] = true;
            }
        }
        let mask = BitMask::new(8, 8, bits).unwrap();
        assert_eq!(iou(&mask, &[bx(1, 2, 3, 3)]).unwrap(), 1.0);
        assert_eq!(iou(&mask, &[bx(5, 5, 3, 3)]).unwrap(), 0.0);

        // top half of a full-frame box
        let half: Vec<bool> = (0..64).map(|i| i < 32).collect();
        let mask = BitMask::new(8, 8, half).unwrap();
        assert_eq!(iou(&mask, &[bx(0, 0, 8, 8)]).unwrap(), 0.5);

        assert!(iou(&mask, &[]).is_err());
        let empty = BitMask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(iou(&empty, &[bx(0, 0, 1, 1)]).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_boxes_are_unioned() {
        let mask = BitMask::new(4, 4, vec![true; 16]).unwrap();
        // Two 2x4 boxes overlapping in one column: union covers 3 columns.
        let boxes = [bx(0, 0, 2, 4), bx(1, 0, 2, 4)];
        assert_eq!(overlap_counts(&mask, &boxes).unwrap(), (12, 16));
    }

    fn brute_counts(mask: &BitMask, boxes: &[BoundingBox]) -> (usize, usize) {
        let (mut i, mut u) = (0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let m = mask.get(y, x);
                let b = boxes
                    .iter()
                    .any(|b| x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h);
                i += (m && b) as usize;
                u += (m || b) as usize;
            }
        }
        (i, u)
    }

    fn arb_case() -> impl Strategy<Value = (BitMask, Vec<BoundingBox>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            let mask = prop::collection::vec(any::<bool>(), h * w)
                .prop_map(move |bits| BitMask::new(h, w, bits).unwrap());
            let one_box = (0..w, 0..h).prop_flat_map(move |(x, y)| {
                (Just(x), Just(y), 1..=w - x, 1..=h - y).prop_map(|(x, y, bw, bh)| bx(x, y, bw, bh))
            });
            (mask, prop::collection::vec(one_box, 1..4))
        })
    }

    proptest! {
        #[test]
        fn fast_iou_matches_brute_force((mask, boxes) in arb_case()) {
            prop_assert_eq!(overlap_counts(&mask, &boxes).unwrap(), brute_counts(&mask, &boxes));
        }

        #[test]
        fn thresholds_nest(v in prop::collection::vec(0f32..=1.0, 16), t1 in 0f64..0.99, dt in 0f64..0.5) {
            let t2 = (t1 + dt).min(0.999);
            let h = heat(4, 4, v);
            let lo = binarize(&h, t1).unwrap();
            let hi = binarize(&h, t2).unwrap();
            for (a, b) in lo.bits().iter().zip(hi.bits()) {
                prop_assert!(*a || !*b);
            }
        }

        #[test]
        fn postprocess_bounds(v in prop::collection::vec(-5f32..5.0, 18)) {
            let r = Tensor::from_vec(&[2, 3, 3], v).unwrap();
            let h = postprocess_relevance(&r, Method::Rap).unwrap();
            let max = h.values().data().iter().copied().fold(0f32, f32::max);
            prop_assert!(h.values().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(max == 0.0 || max == 1.0);
        }

        #[test]
        fn nested_masks_inside_box_are_monotone(h in 2usize..10, w in 2usize..10, k1 in 0usize..100, k2 in 0usize..100) {
            let n = h * w;
            let (a, b) = (k1 % (n + 1), k2 % (n + 1));
            let (small, large) = (a.min(b), a.max(b));
            let m1 = BitMask::new(h, w, (0..n).map(|i| i < small).collect()).unwrap();
            let m2 = BitMask::new(h, w, (0..n).map(|i| i < large).collect()).unwrap();
            let frame = [bx(0, 0, w, h)];
            prop_assert!(iou(&m1, &frame).unwrap() <= iou(&m2, &frame).unwrap());
        }
    }

    #[test]
    fn render_zero_and_peak() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let mut v = vec![0.0; 6];
        v[4] = 1.0;
        render_heatmap(&heat(2, 3, v), None, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        for (x, y, px) in img.enumerate_pixels() {
            let expect = if (x, y) == (1, 1) {
                [255, 0, 0]
            } else {
                [0, 0, 255]
            };
            assert_eq!(px.0, expect);
        }
        let p2 = dir.path().join("h2.png");
        let mut v = vec![0.0; 6];
        v[4] = 1.0;
        render_heatmap(&heat(2, 3, v), None, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn render_overlay_blends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let base = Tensor::filled(Shape::new(vec![1, 1, 1]).unwrap(), 1.0);
        render_heatmap(&heat(1, 1, vec![0.0]), Some(&base), &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        // 0.6 * (0,0,1) + 0.4 * (1,1,1)
        assert_eq!(img.get_pixel(0, 0).0, [102, 102, 255]);
        let wrong = Tensor::filled(Shape::new(vec![1, 2, 2]).unwrap(), 1.0);
        assert!(render_heatmap(&heat(1, 1, vec![0.0]), Some(&wrong), &p).is_err());
    }
}
