//! `export-plots`: SVG + CSV figures from curve and prediction exports.

use crate::error::{CliError, CliResult};
use crate::io;
use crate::pipeline::{chart_name, window_chart};
use crate::print_config;
use bayescan::train::{export_curves, parse_curves};
use bayescan::uncertainty::PredictionRecord;
use clap::Args;
use serde::Serialize;
use std::fmt::Write;
use std::path::{Path, PathBuf};

#[derive(Args, Debug, Serialize)]
pub struct ExportArgs {
    /// Training curves CSV (`metrics.csv` from `train --curves`).
    #[arg(long, required_unless_present = "predictions")]
    pub curves: Option<PathBuf>,
    /// Prediction export from `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Render bar charts for at most this many windows.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub const PREDICTIONS_HEADER: &str = "window_id,predicted,true_label,max_prob,entropy,flagged,\
mean_normal,mean_dos,mean_fuzzing,mean_rpm,mean_gear,std_normal,std_dos,std_fuzzing,std_rpm,std_gear";

pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in records {
        let truth = r.true_label.map(|t| t.code().to_string()).unwrap_or_default();
        let max = r.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = write!(
            out,
            "{},{},{truth},{max},{},{}",
            r.window_id,
            r.predicted.code(),
            r.entropy,
            r.flagged
        );
        for v in r.mean.iter().chain(&r.std) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn export(args: ExportArgs) -> CliResult {
    print_config("export-plots", &args);
    if let Some(path) = &args.curves {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
        let metrics = parse_curves(&text).map_err(|e| CliError::data(path, e))?;
        let written = export_curves(&metrics, &args.out).map_err(|e| CliError::data(&args.out, e))?;
        eprintln!("wrote {} curve files", written.len());
    }
    if let Some(path) = &args.predictions {
        let records = read_predictions(path)?;
        io::write_text(&args.out.join("predictions.csv"), &predictions_csv(&records))?;
        let n = args.limit.unwrap_or(records.len()).min(records.len());
        for r in &records[..n] {
            io::write_text(
                &args.out.join("windows").join(chart_name(r.window_id)),
                &window_chart(r),
            )?;
        }
        eprintln!("wrote predictions.csv and {n} window charts");
    }
    Ok(())
}
