use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprop::dump::write_relevance_dump;
use relprop::forward::argmax;
use relprop::model_io::WEIGHTS_FILE;
use relprop::{
    attribute, check_alpha_beta, conservation_report, evaluate_dataset, forward, load_dataset_manifest,
    load_image, load_image_raw, load_model, lrp_backward, postprocess_relevance, rap_backward,
    render_heatmap, EvalOptions, Method, ModelGraph, TargetMode, Tensor,
};

use crate::{AttributeArgs, EvaluateArgs, Failure, InspectArgs, LrpParams, MethodArg, TargetArg, VerifyArgs};

const VERIFY_TOLERANCE: f64 = 1e-4;

fn method_of(m: MethodArg, lrp: &LrpParams) -> Result<Method, Failure> {
    Ok(match m {
        MethodArg::Lrp => {
            check_alpha_beta(lrp.alpha, lrp.beta)?;
            Method::Lrp {
                alpha: lrp.alpha,
                beta: lrp.beta,
            }
        }
        MethodArg::Rap => Method::Rap,
        MethodArg::Cam => Method::Cam,
    })
}

fn image_channels(model: &ModelGraph) -> Result<usize, Failure> {
    let dims = model.input_shape().dims();
    if dims.len() != 3 {
        return Err(Failure {
            code: 2,
            msg: format!("model input {} is not an image", model.input_shape()),
        });
    }
    Ok(dims[0])
}

fn class_label(model: &ModelGraph, k: usize) -> &str {
    &model.class_names()[k]
}

pub fn cmd_attribute(a: &AttributeArgs) -> Result<(), Failure> {
    let method = method_of(a.method, &a.lrp)?;
    let model = load_model(&a.model)?;
    let channels = image_channels(&model)?;
    let input = load_image(&a.image, model.preprocessing(), channels)?;
    let (logits, trace) = forward(&model, &input)?;
    let target = match a.target {
        TargetArg::Predicted => argmax(&logits).0,
        TargetArg::Index(i) => {
            model.check_class(i)?;
            i
        }
        TargetArg::Label => {
            return Err(Failure::usage(
                "--target label needs a dataset; use `predicted` or a class index",
            ))
        }
    };
    let relevance = attribute(&model, &trace, target, method)?;
    let heat = postprocess_relevance(&relevance, method)?;
    let base = load_image_raw(&a.image, model.preprocessing().resize, channels)?;

    fs::create_dir_all(&a.out).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", a.out.display()),
    })?;
    render_heatmap(&heat, None, a.out.join("heatmap.png"))?;
    render_heatmap(&heat, Some(&base), a.out.join("overlay.png"))?;
    write_relevance_dump(a.out.join("relevance.bin"), &relevance)?;

    println!("method: {method}");
    println!("target: {} ({target})", class_label(&model, target));
    println!("f(x): {:.6}", logits.data()[target]);
    println!("wrote: {}", a.out.display());
    Ok(())
}

fn check_thresholds(ts: &[f64]) -> Result<(), Failure> {
    if ts.is_empty() {
        return Err(Failure::usage("at least one threshold is required"));
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Failure::usage(format!("threshold {t} outside [0, 1)")));
    }
    if ts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::usage("thresholds must be strictly ascending"));
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    check_thresholds(&a.thresholds)?;
    let mut methods = Vec::new();
    for &m in &a.methods {
        let m = method_of(m, &a.lrp)?;
        if methods.contains(&m) {
            return Err(Failure::usage(format!("method {m} given twice")));
        }
        methods.push(m);
    }
    if a.jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let model = load_model(&a.model)?;
    image_channels(&model)?;
    let samples = load_dataset_manifest(&a.dataset, model.preprocessing().resize)?;
    let opts = EvalOptions {
        target: match a.target {
            TargetArg::Label => TargetMode::Label,
            TargetArg::Predicted => TargetMode::Predicted,
            TargetArg::Index(i) => TargetMode::Index(i),
        },
        jobs: a.jobs,
    };
    let report = evaluate_dataset(&model, &samples, &methods, &a.thresholds, &opts)?;
    report.write_csv(&a.out)?;

    for (path, msg) in &report.failures {
        eprintln!("failed: {}: {msg}", path.display());
    }
    let evaluated = samples.len() - report.skipped_without_boxes - report.failures.len();
    println!(
        "samples: {evaluated} evaluated, {} without boxes, {} failed",
        report.skipped_without_boxes,
        report.failures.len()
    );
    print!("{:<8}", "method");
    for t in &report.thresholds {
        print!("{:>9}", format!("T={t}"));
    }
    println!();
    for (m, row) in report.summary_grid() {
        print!("{:<8}", m.name());
        for v in row {
            print!("{v:>9.4}");
        }
        println!();
    }
    println!("wrote: {}", a.out.display());
    Ok(())
}

fn layer_label(model: &ModelGraph, l: usize) -> String {
    match model.layers().get(l) {
        Some(layer) => format!("layer {l} {} input", layer.kind_name()),
        None => "output".to_string(),
    }
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    if a.n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let model = load_model(&a.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let dims = model.input_shape().dims().to_vec();
    let n = model.input_shape().numel();
    let (mut lrp_drift, mut rap_drift) = (0.0f64, 0.0f64);
    let mut checked = 0;
    for s in 0..a.n {
        let x = Tensor::from_vec(&dims, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())?;
        let (logits, trace) = forward(&model, &x)?;
        let (target, value) = argmax(&logits);
        println!(
            "sample {s}: target {} ({target}) f(x)={value:.6}",
            class_label(&model, target)
        );
        if value <= 0.0 {
            println!("  skipped: f(x) <= 0");
            continue;
        }
        checked += 1;
        for (name, rmap) in [
            ("lrp", lrp_backward(&model, &trace, target, 1.0, 0.0)?),
            ("rap", rap_backward(&model, &trace, target)?),
        ] {
            let rep = conservation_report(&rmap);
            for l in (0..rep.per_layer_sums.len()).rev() {
                let sum = rep.per_layer_sums[rep.per_layer_sums.len() - 1 - l];
                let drift = (sum - rep.output_value).abs() / rep.output_value.abs().max(1e-12);
                println!(
                    "  {name} {:<28} sum={sum:.6e} drift={drift:.3e}",
                    layer_label(&model, l)
                );
            }
            if name == "lrp" {
                lrp_drift = lrp_drift.max(rep.max_relative_drift);
            } else {
                rap_drift = rap_drift.max(rep.max_relative_drift);
            }
        }
    }
    println!("checked: {checked} of {}", a.n);
    println!("max drift: lrp {lrp_drift:.3e} rap {rap_drift:.3e}");
    if lrp_drift > VERIFY_TOLERANCE {
        return Err(Failure::numerical(format!(
            "LRP drift {lrp_drift:.3e} exceeds {VERIFY_TOLERANCE:e}"
        )));
    }
    println!("status: ok");
    Ok(())
}

fn blob_floats(dir: &Path) -> Option<u64> {
    fs::metadata(dir.join(WEIGHTS_FILE)).ok().map(|m| m.len() / 4)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    println!("input: {}", model.input_shape());
    println!("{:>3}  {:<14} {:<14} {:>8}", "#", "kind", "output", "params");
    for (l, layer) in model.layers().iter().enumerate() {
        println!(
            "{l:>3}  {:<14} {:<14} {:>8}",
            layer.kind_name(),
            model.layer_shape(l + 1).to_string(),
            layer.param_count()
        );
    }
    let params = model.param_count();
    match blob_floats(&a.model) {
        Some(f) => println!("parameters: {params} (weights.bin holds {f} floats)"),
        None => println!("parameters: {params}"),
    }
    let pre = model.preprocessing();
    println!(
        "preprocessing: mean {:?} std {:?} resize {}x{}",
        pre.mean, pre.std, pre.resize.0, pre.resize.1
    );
    println!("classes: {}", model.class_names().join(", "));
    Ok(())
}
