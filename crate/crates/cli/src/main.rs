//! `relprop` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error, 3 numerical
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relprop::Error;

#[derive(Parser, Debug)]
#[command(
    name = "relprop",
    version,
    about = "Relevance heatmaps for convolutional classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decompose one image's prediction and write heatmap, overlay and raw relevance.
    Attribute(AttributeArgs),
    /// Score attribution methods against bounding boxes over a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Check per-layer relevance conservation on random inputs.
    Verify(VerifyArgs),
    /// Print the layer table, preprocessing and classes of a model.
    Inspect(InspectArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodArg {
    Lrp,
    Rap,
    Cam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TargetArg {
    Label,
    Predicted,
    Index(usize),
}

impl FromStr for TargetArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label" => Ok(TargetArg::Label),
            "predicted" => Ok(TargetArg::Predicted),
            _ => s
                .parse()
                .map(TargetArg::Index)
                .map_err(|_| format!("expected `label`, `predicted` or a class index, got `{s}`")),
        }
    }
}

#[derive(Args, Debug)]
struct LrpParams {
    /// Weight of positive contributions (LRP only).
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Weight of negative contributions (LRP only); alpha - beta must be 1.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    /// Directory holding model.json and weights.bin.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Lrp)]
    method: MethodArg,
    #[command(flatten)]
    lrp: LrpParams,
    /// `predicted` or a class index.
    #[arg(long, default_value = "predicted")]
    target: TargetArg,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL dataset manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "lrp,rap,cam")]
    methods: Vec<MethodArg>,
    #[command(flatten)]
    lrp: LrpParams,
    /// Strictly ascending, each in [0, 1).
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    thresholds: Vec<f64>,
    /// `label`, `predicted` or a class index.
    #[arg(long, default_value = "label")]
    target: TargetArg,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of random inputs.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        Failure {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::ClassOutOfRange { .. } => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Attribute(a) => commands::cmd_attribute(&a),
        Command::Evaluate(a) => commands::cmd_evaluate(&a),
        Command::Verify(a) => commands::cmd_verify(&a),
        Command::Inspect(a) => commands::cmd_inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
