//! generate, encode, train, eval, predict.

use crate::error::{CliError, CliResult};
use crate::io::{self, FrameFormat};
use crate::{print_config, ModeArg, TrainFlags};
use bayescan::can::{synth_capture, AttackKind, AttackSegment, CandumpLine, Capture, CaptureSource, SynthProfile};
use bayescan::checkpoint::Checkpoint;
use bayescan::dataset::{build_synthetic_dataset, SyntheticDatasetConfig};
use bayescan::features::{split_dataset, window_stream, DatasetSplit, EncodedDataset, LabelRule};
use bayescan::model::InitConfig;
use bayescan::plot::class_bars;
use bayescan::train::{evaluate, export_curves, train_with, AdamConfig, EvalReport, TrainConfig, TrainOutcome};
use bayescan::uncertainty::{predict_batch, triage_decide, PredictionRecord, UncertaintyError, DEFAULT_EVAL_SAMPLES};
use bayescan::variational::PriorSpec;
use bayescan::{derive_seed, ClassLabel, FeatureWindow, Mode, ModelSpec, ModelState, TriagePolicy, WindowConfig};
use clap::{Args, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackArg {
    None,
    Dos,
    Fuzz,
    Rpm,
    Gear,
    /// Bursts of every attack type in turn, separated by clean traffic.
    Mixed,
}

impl AttackArg {
    fn kind(self) -> Option<AttackKind> {
        match self {
            AttackArg::Dos => Some(AttackKind::Dos),
            AttackArg::Fuzz => Some(AttackKind::Fuzzing),
            AttackArg::Rpm => Some(AttackKind::RpmSpoof),
            AttackArg::Gear => Some(AttackKind::GearSpoof),
            AttackArg::None | AttackArg::Mixed => None,
        }
    }
}

fn default_rate(kind: AttackKind) -> f64 {
    let rates = SyntheticDatasetConfig::default().attack_rates_hz;
    rates[kind.class().index() - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutFormat {
    Capture,
    Csv,
    Candump,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = AttackArg::Mixed)]
    pub attack: AttackArg,
    /// Number of frames to emit.
    #[arg(long, default_value_t = 20_000)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutFormat::Capture)]
    pub format: OutFormat,
    /// Background (benign) frame rate in Hz.
    #[arg(long, default_value_t = 2000.0)]
    pub background_rate: f64,
    /// Injection rate in Hz (default depends on the attack).
    #[arg(long)]
    pub attack_rate: Option<f64>,
    /// Burst length and gap in seconds for `mixed` (default: nine equal
    /// slots, so every attack type appears once).
    #[arg(long)]
    pub burst: Option<f64>,
}

fn mixed_profile(args: &GenerateArgs, duration: f64, burst: f64) -> SynthProfile {
    let mut p = SynthProfile::normal(duration, args.background_rate);
    let mut t = burst;
    for kind in AttackKind::ALL.iter().cycle() {
        if t >= duration {
            break;
        }
        p.attacks.push(AttackSegment {
            kind: *kind,
            start_s: t,
            end_s: (t + burst).min(duration),
            rate_hz: args.attack_rate.unwrap_or_else(|| default_rate(*kind)),
        });
        t += 2.0 * burst;
    }
    p
}

pub fn generate(args: GenerateArgs) -> CliResult {
    print_config("generate", &args);
    if args.attack == AttackArg::Mixed && args.format == OutFormat::Csv {
        return Err(CliError::Usage(
            "dataset CSV holds a single attack type per file; use --format capture for mixed traffic".into(),
        ));
    }
    if args.frames == 0
        || args.background_rate.is_nan()
        || args.background_rate <= 0.0
        || args.burst.is_some_and(|b| b.is_nan() || b <= 0.0)
    {
        return Err(CliError::Usage(
            "--frames, --background-rate and --burst must be positive".into(),
        ));
    }
    // Mean frame rate over the capture, so the stream covers the requested
    // count with slack before truncation.
    let mean_attack_rate = AttackKind::ALL
        .iter()
        .map(|k| args.attack_rate.unwrap_or_else(|| default_rate(*k)))
        .sum::<f64>()
        / 4.0;
    let total_rate = args.background_rate
        + match (args.attack, args.attack.kind()) {
            (AttackArg::Mixed, _) => mean_attack_rate * if args.burst.is_some() { 0.5 } else { 4.0 / 9.0 },
            (_, Some(kind)) => args.attack_rate.unwrap_or_else(|| default_rate(kind)),
            _ => 0.0,
        };
    let duration = args.frames as f64 * 1.05 / total_rate + 0.01;
    let profile = match (args.attack, args.attack.kind()) {
        (AttackArg::Mixed, _) => mixed_profile(&args, duration, args.burst.unwrap_or(duration / 9.0)),
        (_, Some(kind)) => SynthProfile::single(
            kind,
            duration,
            args.background_rate,
            args.attack_rate.unwrap_or_else(|| default_rate(kind)),
        ),
        _ => SynthProfile::normal(duration, args.background_rate),
    };
    let mut frames = synth_capture(&profile, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    frames.truncate(args.frames);
    let cap = Capture::new(CaptureSource::SyntheticSeed(args.seed), frames);
    let mut out = io::create(&args.out)?;
    let written = match args.format {
        OutFormat::Capture => cap.write_to(&mut out).map_err(|e| e.to_string()),
        OutFormat::Csv => cap
            .frames
            .iter()
            .try_for_each(|f| writeln!(out, "{}", f.to_dataset_csv()))
            .map_err(|e| e.to_string()),
        OutFormat::Candump => cap
            .frames
            .iter()
            .try_for_each(|f| {
                writeln!(
                    out,
                    "{}",
                    CandumpLine {
                        iface: "can0".into(),
                        frame: *f
                    }
                )
            })
            .map_err(|e| e.to_string()),
    };
    written
        .and_then(|_| out.flush().map_err(|e| e.to_string()))
        .map_err(|e| CliError::data(&args.out, e))?;
    eprintln!(
        "wrote {} frames to {} (class histogram {:?})",
        cap.frames.len(),
        args.out.display(),
        cap.meta.class_histogram
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    /// Capture, dataset CSV or candump files, in order.
    #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FrameFormat::Auto)]
    pub format: FrameFormat,
    /// Attack class of dataset-CSV inputs (their `T` rows).
    #[arg(long, value_parser = io::parse_class)]
    pub class: Option<ClassLabel>,
    /// Build a balanced synthetic dataset of this many windows instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub window_len: usize,
    /// Window stride in frames (default: the window length).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn encode(args: EncodeArgs) -> CliResult {
    print_config("encode", &args);
    let windows = match args.synthetic {
        Some(n) => {
            if n < ClassLabel::COUNT {
                return Err(CliError::Usage(format!(
                    "--synthetic needs at least {} windows",
                    ClassLabel::COUNT
                )));
            }
            let cfg = SyntheticDatasetConfig::total(n, args.window_len, args.seed);
            build_synthetic_dataset(&cfg).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None if args.input.is_empty() => return Err(CliError::Usage("give --input files or --synthetic N".into())),
        None => {
            let cfg = WindowConfig {
                window_len: args.window_len,
                stride: args.stride.unwrap_or(args.window_len),
                label_rule: LabelRule::AnyInjected,
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let mut all = Vec::new();
            for (i, path) in args.input.iter().enumerate() {
                if !args.format.resolve(path).labeled() {
                    tracing::warn!(path = %path.display(), "candump input carries no labels; windows are labeled normal");
                }
                let cap = io::read_capture(path, args.format, args.class)?;
                all.extend(window_stream(&cap.frames, &cfg, i as u32).map_err(|e| CliError::data(path, e))?);
            }
            all
        }
    };
    let ds = EncodedDataset::new(args.window_len, windows).map_err(|e| CliError::Usage(e.to_string()))?;
    io::write_dataset(&args.out, &ds)?;
    eprintln!(
        "wrote {} windows of {} frames to {} (class histogram {:?})",
        ds.windows.len(),
        ds.window_len,
        args.out.display(),
        bayescan::features::class_histogram(&ds.windows)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    /// State at the epoch with the highest validation accuracy.
    Best,
    /// State after the final epoch.
    Last,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum, default_value_t = Keep::Best)]
    pub keep: Keep,
    /// Write metrics.csv and curve SVGs here.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Rolling best.json / last.json during training.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Seeds derived from the run seed: the split and the training loop use it
/// directly, weight init and evaluation draws use derived streams.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 1)
}

pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, 2)
}

pub fn train_config(flags: &TrainFlags, seed: u64, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        epochs: flags.epochs,
        batch_size: flags.batch_size,
        adam: AdamConfig {
            lr: flags.lr,
            ..Default::default()
        },
        seed,
        train_samples: flags.train_samples,
        val_samples: flags.val_samples,
        likelihood: flags.likelihood.into(),
        patience: flags.patience,
        checkpoint_dir,
    }
}

pub fn split(ds: EncodedDataset, ratios: (f64, f64, f64), seed: u64) -> CliResult<DatasetSplit> {
    let s = split_dataset(ds.windows, ratios, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if s.train.is_empty() || s.val.is_empty() {
        return Err(CliError::Usage(
            "split leaves the train or validation part empty".into(),
        ));
    }
    Ok(s)
}

/// Train one mode on a prepared split, logging each epoch.
pub fn fit(
    mode: Mode,
    window_len: usize,
    flags: &TrainFlags,
    cfg: &TrainConfig,
    split: &DatasetSplit,
) -> CliResult<TrainOutcome> {
    let spec = ModelSpec::default_for(window_len, mode);
    let init = InitConfig {
        rho: flags.init_rho,
        ..Default::default()
    };
    let prior = PriorSpec::IsotropicGaussian {
        sigma: flags.prior_sigma,
    };
    let state =
        ModelState::init(spec, &init, prior, init_seed(cfg.seed)).map_err(|e| CliError::Usage(e.to_string()))?;
    let label = match mode {
        Mode::Deterministic => "det",
        Mode::Bayesian => "bayes",
    };
    let outcome = train_with(state, &split.train, &split.val, cfg, |m| {
        tracing::info!(
            mode = label,
            epoch = m.epoch,
            train_loss = m.train_loss,
            train_acc = m.train_acc,
            val_loss = m.val_loss,
            val_acc = m.val_acc,
            "epoch"
        );
        true
    })?;
    Ok(outcome)
}

pub fn print_report(name: &str, r: &EvalReport) {
    eprintln!(
        "{name}: n={} accuracy={:.4} cross_entropy={:.4}",
        r.count, r.accuracy, r.cross_entropy
    );
    eprintln!("confusion (rows true, cols predicted: normal dos fuzzing rpm gear)");
    for (c, row) in ClassLabel::ALL.iter().zip(&r.confusion) {
        eprintln!("  {:>8} {:?}", c.name(), row);
    }
}

pub fn train(args: TrainArgs) -> CliResult {
    print_config("train", &args);
    let ds = io::read_dataset(&args.data)?;
    let w = ds.window_len;
    let cfg = train_config(&args.train, args.seed, args.checkpoint_dir.clone());
    cfg.validate()?;
    let split = split(ds, args.train.split, args.seed)?;
    eprintln!(
        "split: train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let mode: Mode = args.mode.into();
    let out = fit(mode, w, &args.train, &cfg, &split)?;
    let state = match args.keep {
        Keep::Best => out.best,
        Keep::Last => out.last,
    };
    eprintln!(
        "kept {} state (best epoch {})",
        if args.keep == Keep::Best { "best" } else { "last" },
        out.best_epoch
    );
    if let Some(dir) = &args.curves {
        export_curves(&out.metrics, dir).map_err(|e| CliError::data(dir, e))?;
    }
    if !split.test.is_empty() {
        let r = evaluate(&state, &split.test, args.train.eval_samples, eval_seed(args.seed))?;
        print_report("test", &r);
    }
    io::write_checkpoint(&args.out, &Checkpoint::new(state, Some(cfg), out.metrics))?;
    eprintln!("wrote checkpoint {}", args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    All,
    /// The test part of the split used at training time.
    Test,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// MC weight draws (Bayesian models only; default 30).
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Split fractions used at training time.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = crate::parse_split)]
    pub ratios: (f64, f64, f64),
    /// Split and MC seed (default: the checkpoint's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reject `--mc-samples` on deterministic models; resolve the draw count.
fn mc_samples(state: &ModelState, flag: Option<usize>) -> CliResult<usize> {
    match (state.mode(), flag) {
        (Mode::Deterministic, Some(_)) => Err(CliError::Usage(UncertaintyError::ModeMismatch.to_string())),
        (_, Some(s)) if s < 2 => Err(CliError::Usage("--mc-samples must be at least 2".into())),
        (_, s) => Ok(s.unwrap_or(DEFAULT_EVAL_SAMPLES)),
    }
}

pub fn eval(args: EvalArgs) -> CliResult {
    let ck = io::read_checkpoint(&args.model)?;
    let seed = args.seed.or(ck.train_config.as_ref().map(|c| c.seed)).unwrap_or(0);
    print_config("eval", &(&args, ("resolved_seed", seed)));
    let samples = mc_samples(&ck.state, args.mc_samples)?;
    let ds = io::read_dataset(&args.data)?;
    check_window_len(&ck.state, ds.window_len, &args.data)?;
    let windows = match args.split {
        SplitArg::All => ds.windows,
        SplitArg::Test => {
            split_dataset(ds.windows, args.ratios, seed)
                .map_err(|e| CliError::Usage(e.to_string()))?
                .test
        }
    };
    let r = evaluate(&ck.state, &windows, samples, eval_seed(seed))?;
    print_report("eval", &r);
    println!("{}", serde_json::to_string(&r).expect("report serializes"));
    if let Some(out) = &args.out {
        io::write_text(out, &serde_json::to_string_pretty(&r).expect("report serializes"))?;
    }
    Ok(())
}

fn check_window_len(state: &ModelState, w: usize, path: &Path) -> CliResult {
    let want = state.spec.input[1];
    if w != want {
        return Err(CliError::data(
            path,
            format!("windows of {w} frames, model expects {want}"),
        ));
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = FrameFormat::Auto)]
    pub format: FrameFormat,
    /// Attack class of a dataset-CSV input.
    #[arg(long, value_parser = io::parse_class)]
    pub class: Option<ClassLabel>,
    /// MC weight draws (Bayesian models only; default 30).
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Flag windows whose top mean probability is below this.
    #[arg(long, default_value_t = TriagePolicy::default().max_prob_threshold)]
    pub tau: f64,
    /// Flag windows whose predictive entropy (nats) exceeds this.
    #[arg(long, default_value_t = TriagePolicy::default().entropy_threshold)]
    pub eta: f64,
    /// Window stride in frames (default: the window length).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prediction export (one JSON object per line); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one class-probability bar chart per window here.
    #[arg(long)]
    pub charts: Option<PathBuf>,
}

pub fn chart_name(window_id: u64) -> String {
    format!("window_{window_id:06}.svg")
}

pub fn window_chart(r: &PredictionRecord) -> String {
    let title = format!("window {}: predicted {}", r.window_id, r.predicted);
    class_bars(&title, &r.mean, &r.std, r.entropy, r.true_label)
}

pub fn predict(args: PredictArgs) -> CliResult {
    print_config("predict", &args);
    let ck = io::read_checkpoint(&args.model)?;
    let samples = mc_samples(&ck.state, args.mc_samples)?;
    let policy = TriagePolicy::new(args.tau, args.eta).map_err(|e| CliError::Usage(e.to_string()))?;
    let format = args.format.resolve(&args.input);
    let cap = io::read_capture(&args.input, format, args.class)?;
    let w = ck.state.spec.input[1];
    let cfg = WindowConfig {
        window_len: w,
        stride: args.stride.unwrap_or(w),
        label_rule: LabelRule::AnyInjected,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let windows: Vec<FeatureWindow> =
        window_stream(&cap.frames, &cfg, 0).map_err(|e| CliError::data(&args.input, e))?;
    let refs: Vec<&FeatureWindow> = windows.iter().collect();
    let summaries = predict_batch(&ck.state, &refs, samples, args.seed).map_err(|e| CliError::Data(e.to_string()))?;
    let records: Vec<PredictionRecord> = windows
        .iter()
        .zip(&summaries)
        .enumerate()
        .map(|(i, (win, s))| {
            let truth = format.labeled().then_some(win.label);
            PredictionRecord::new(i as u64, s, &triage_decide(s, &policy), truth)
        })
        .collect();

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    match &args.out {
        Some(path) => io::write_text(path, &text)?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Data(e.to_string()))?,
    }
    if let Some(dir) = &args.charts {
        for r in &records {
            io::write_text(&dir.join(chart_name(r.window_id)), &window_chart(r))?;
        }
    }
    let flagged = records.iter().filter(|r| r.flagged).count();
    eprintln!("{} windows, {} flagged for triage", records.len(), flagged);
    if format.labeled() && !records.is_empty() {
        let hits = records.iter().filter(|r| Some(r.predicted) == r.true_label).count();
        eprintln!("accuracy {:.4}", hits as f64 / records.len() as f64);
    }
    Ok(())
}
