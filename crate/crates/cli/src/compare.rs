//! Train both modes on identical splits and report side by side.

use crate::error::{CliError, CliResult};
use crate::io;
use crate::pipeline::{eval_seed, fit, print_report, split, train_config};
use crate::{print_config, TrainFlags};
use bayescan::checkpoint::Checkpoint;
use bayescan::features::class_histogram;
use bayescan::plot::{line_chart, Series};
use bayescan::train::{evaluate, EpochMetrics, EvalReport};
use bayescan::{ClassLabel, Mode};
use clap::Args;
use serde::Serialize;
use std::fmt::Write;
use std::path::PathBuf;

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Serialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub test: EvalReport,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub seed: u64,
    pub window_len: usize,
    pub split_sizes: [usize; 3],
    pub test_class_histogram: [u64; ClassLabel::COUNT],
    pub config: TrainFlags,
    pub deterministic: ModeReport,
    pub bayesian: ModeReport,
    /// Deterministic minus Bayesian test accuracy.
    pub accuracy_delta: f64,
}

pub const CURVES_HEADER: &str = "epoch,mode,train_loss,train_acc,val_loss,val_acc,kl,nll,acc_gap,loss_gap";

/// Both runs in long form; `acc_gap = train_acc - val_acc`,
/// `loss_gap = val_loss - train_loss`.
pub fn joint_curves(det: &[EpochMetrics], bayes: &[EpochMetrics]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for (name, ms) in [("det", det), ("bayes", bayes)] {
        for m in ms {
            let _ = writeln!(
                out,
                "{},{name},{},{},{},{},{},{},{},{}",
                m.epoch,
                m.train_loss,
                m.train_acc,
                m.val_loss,
                m.val_acc,
                m.kl,
                m.nll,
                m.train_acc - m.val_acc,
                m.val_loss - m.train_loss
            );
        }
    }
    out
}

fn series(name: &str, ms: &[EpochMetrics], f: impl Fn(&EpochMetrics) -> f64) -> Series {
    Series {
        name: name.into(),
        points: ms.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    }
}

fn confusion_csv(r: &EvalReport) -> String {
    let mut out = String::from("true\\predicted");
    for c in ClassLabel::ALL {
        let _ = write!(out, ",{}", c.name());
    }
    out.push('\n');
    for (c, row) in ClassLabel::ALL.iter().zip(&r.confusion) {
        out.push_str(c.name());
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn markdown(r: &Report) -> String {
    let mut out = String::from("# Deterministic vs Bayesian\n\n");
    let _ = writeln!(
        out,
        "seed {}, window length {}, split train/val/test {}/{}/{}\n",
        r.seed, r.window_len, r.split_sizes[0], r.split_sizes[1], r.split_sizes[2]
    );
    out.push_str("| mode | epochs | best epoch | final train acc | final val acc | test acc | test CE |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for m in [&r.deterministic, &r.bayesian] {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            serde_json::to_value(m.mode)
                .expect("mode serializes")
                .as_str()
                .unwrap_or("?"),
            m.epochs_run,
            m.best_epoch,
            m.final_train_acc,
            m.final_val_acc,
            m.test.accuracy,
            m.test.cross_entropy
        );
    }
    let _ = writeln!(
        out,
        "\nDeterministic minus Bayesian test accuracy: {:+.4}\n",
        r.accuracy_delta
    );
    for (name, m) in [("Deterministic", &r.deterministic), ("Bayesian", &r.bayesian)] {
        let _ = writeln!(out, "## {name} confusion (rows true, columns predicted)\n");
        out.push_str("| |");
        for c in ClassLabel::ALL {
            let _ = write!(out, " {} |", c.name());
        }
        out.push_str("\n|---|---|---|---|---|---|\n");
        for (c, row) in ClassLabel::ALL.iter().zip(&m.test.confusion) {
            let _ = write!(out, "| {} |", c.name());
            for v in row {
                let _ = write!(out, " {v} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn compare(args: CompareArgs) -> CliResult {
    print_config("compare", &args);
    let ds = io::read_dataset(&args.data)?;
    let w = ds.window_len;
    let cfg = train_config(&args.train, args.seed, None);
    cfg.validate()?;
    let parts = split(ds, args.train.split, args.seed)?;
    if parts.test.is_empty() {
        return Err(CliError::Usage("compare needs a non-empty test split".into()));
    }

    let mut reports = Vec::new();
    let mut curves = Vec::new();
    for mode in [Mode::Deterministic, Mode::Bayesian] {
        let out = fit(mode, w, &args.train, &cfg, &parts)?;
        let test = evaluate(&out.best, &parts.test, args.train.eval_samples, eval_seed(args.seed))?;
        print_report(&format!("{mode:?} test"), &test);
        let last = out.metrics.last().copied().expect("at least one epoch");
        let name = if mode == Mode::Deterministic { "det" } else { "bayes" };
        io::write_checkpoint(
            &args.out.join(format!("{name}.json")),
            &Checkpoint::new(out.best, Some(cfg.clone()), out.metrics.clone()),
        )?;
        io::write_text(&args.out.join(format!("confusion_{name}.csv")), &confusion_csv(&test))?;
        reports.push(ModeReport {
            mode,
            epochs_run: out.metrics.len(),
            best_epoch: out.best_epoch,
            final_train_acc: last.train_acc,
            final_val_acc: last.val_acc,
            test,
        });
        curves.push(out.metrics);
    }
    let bayesian = reports.pop().expect("two reports");
    let deterministic = reports.pop().expect("two reports");
    let (det_m, bayes_m) = (&curves[0], &curves[1]);

    io::write_text(&args.out.join("curves.csv"), &joint_curves(det_m, bayes_m))?;
    let acc = line_chart(
        "Accuracy",
        "epoch",
        "accuracy",
        &[
            series("det train", det_m, |m| m.train_acc),
            series("det val", det_m, |m| m.val_acc),
            series("bayes train", bayes_m, |m| m.train_acc),
            series("bayes val", bayes_m, |m| m.val_acc),
        ],
    );
    io::write_text(&args.out.join("accuracy.svg"), &acc)?;
    // The Bayesian objective carries the KL term, so each mode gets its own
    // loss axis.
    for (name, ms) in [("det", det_m), ("bayes", bayes_m)] {
        let loss = line_chart(
            &format!("{name} objective"),
            "epoch",
            "loss",
            &[series("train", ms, |m| m.train_loss), series("val", ms, |m| m.val_loss)],
        );
        io::write_text(&args.out.join(format!("loss_{name}.svg")), &loss)?;
    }
    let gap = line_chart(
        "Train minus validation accuracy",
        "epoch",
        "gap",
        &[
            series("det", det_m, |m| m.train_acc - m.val_acc),
            series("bayes", bayes_m, |m| m.train_acc - m.val_acc),
        ],
    );
    io::write_text(&args.out.join("gap.svg"), &gap)?;

    let report = Report {
        seed: args.seed,
        window_len: w,
        split_sizes: [parts.train.len(), parts.val.len(), parts.test.len()],
        test_class_histogram: class_histogram(&parts.test),
        accuracy_delta: deterministic.test.accuracy - bayesian.test.accuracy,
        config: args.train.clone(),
        deterministic,
        bayesian,
    };
    io::write_text(
        &args.out.join("report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    io::write_text(&args.out.join("report.md"), &markdown(&report))?;
    eprintln!(
        "test accuracy: deterministic {:.4}, bayesian {:.4}; wrote {}",
        report.deterministic.test.accuracy,
        report.bayesian.test.accuracy,
        args.out.display()
    );
    Ok(())
}
