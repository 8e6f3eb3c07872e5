//! `bayescan`: the operator pipeline.
//!
//! ```text
//! bayescan generate --attack mixed --frames 20000 --seed 1 --out cap.ndjson
//! bayescan encode --input cap.ndjson --out data.canw
//! bayescan encode --synthetic 20000 --seed 7 --out data.canw
//! bayescan train --mode bayes --data data.canw --epochs 50 --seed 7 --out model.json
//! bayescan eval --model model.json --data data.canw --split test
//! bayescan predict --model model.json --input cap.ndjson --charts charts/
//! bayescan compare --data data.canw --seed 7 --out cmp/
//! bayescan serve --config service.toml
//! bayescan export-plots --curves cmp/det/metrics.csv --out figs/
//! ```
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod compare;
mod error;
mod io;
mod pipeline;
mod plots;
mod serve;

use clap::{Args, Parser, Subcommand, ValueEnum};
use error::CliResult;
use serde::Serialize;
use std::io::IsTerminal;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bayescan",
    version,
    about = "CAN intrusion detection with deterministic and Bayesian classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a CAN capture.
    Generate(pipeline::GenerateArgs),
    /// Encode captures (or a synthetic balanced set) into a window dataset.
    Encode(pipeline::EncodeArgs),
    /// Train one model.
    Train(pipeline::TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(pipeline::EvalArgs),
    /// Per-window predictions with uncertainty.
    Predict(pipeline::PredictArgs),
    /// Train both modes on identical splits and report side by side.
    Compare(compare::CompareArgs),
    /// Run the triage HTTP service.
    Serve(serve::ServeArgs),
    /// Render curve and prediction exports as SVG + CSV.
    ExportPlots(plots::ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Det,
    Bayes,
}

impl From<ModeArg> for bayescan::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Det => bayescan::Mode::Deterministic,
            ModeArg::Bayes => bayescan::Mode::Bayesian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodArg {
    /// Batch-sum cross-entropy (full-dataset objective per epoch).
    Sum,
    /// Batch-mean cross-entropy.
    Mean,
}

impl From<LikelihoodArg> for bayescan::train::LikelihoodScale {
    fn from(l: LikelihoodArg) -> Self {
        match l {
            LikelihoodArg::Sum => Self::DatasetSum,
            LikelihoodArg::Mean => Self::BatchMean,
        }
    }
}

/// Training flags shared by `train` and `compare`.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Weight draws per training step (Bayesian).
    #[arg(long, default_value_t = 1)]
    pub train_samples: usize,
    /// Weight draws per validation window (Bayesian).
    #[arg(long, default_value_t = 30)]
    pub val_samples: usize,
    /// Weight draws per test window (Bayesian).
    #[arg(long, default_value_t = 30)]
    pub eval_samples: usize,
    #[arg(long, value_enum, default_value_t = LikelihoodArg::Sum)]
    pub likelihood: LikelihoodArg,
    /// Stop after this many epochs without validation-loss improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_split)]
    pub split: (f64, f64, f64),
    /// Prior standard deviation (Bayesian).
    #[arg(long, default_value_t = 1.0)]
    pub prior_sigma: f64,
    /// Initial posterior rho, sigma = softplus(rho) (Bayesian).
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    pub init_rho: f64,
}

fn parse_split(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad fraction {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] if [a, b, c].iter().all(|x| *x >= 0.0) && ((a + b + c) - 1.0).abs() < 1e-9 => Ok((a, b, c)),
        _ => Err("expected three non-negative fractions summing to 1, e.g. 0.8,0.1,0.1".into()),
    }
}

/// Print the fully resolved configuration of a run (stderr, one line).
pub fn print_config<T: Serialize>(command: &str, cfg: &T) {
    let body = serde_json::to_string(cfg).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    eprintln!("resolved config [{command}]: {body}");
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(a) => pipeline::generate(a),
        Command::Encode(a) => pipeline::encode(a),
        Command::Train(a) => pipeline::train(a),
        Command::Eval(a) => pipeline::eval(a),
        Command::Predict(a) => pipeline::predict(a),
        Command::Compare(a) => compare::compare(a),
        Command::Serve(a) => serve::serve(a),
        Command::ExportPlots(a) => plots::export(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
