//! Minibatch training for both model modes, evaluation, and curve export.
//!
//! Deterministic mode minimizes batch-mean cross-entropy. Bayesian mode
//! minimizes the Monte-Carlo variational objective with `kl_weight = 1/M`
//! for `M` minibatches per epoch and a configurable likelihood scale.

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::can::ClassLabel;
use crate::features::FeatureWindow;
use crate::model::{batch_tensor, forward_graph, predict_classes, Mode, ModelError, ModelState, Params};
use crate::plot::{line_chart, Series};
use crate::uncertainty::{self, UncertaintyError};
use crate::variational::{elbo_mc, ElboWeights, GaussianNoise, GaussianParam, VariationalError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

const C: usize = ClassLabel::COUNT;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Numerical {
        epoch: usize,
        batch: usize,
        /// State after the last fully completed epoch.
        last_good: Box<ModelState>,
        metrics: Vec<EpochMetrics>,
    },
    #[error("training cancelled")]
    Cancelled,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed curve file: {0}")]
    Format(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(TrainError::ShapeMismatch(format!(
                "tensor {i}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// How the per-batch likelihood term is scaled against `kl_weight = 1/M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScale {
    /// Batch-mean cross-entropy.
    BatchMean,
    /// Batch-sum cross-entropy (`m` × batch mean). With `kl_weight = 1/M`
    /// the per-epoch sum of batch objectives equals the full-dataset
    /// variational objective.
    #[default]
    DatasetSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Weight draws per training step (Bayesian).
    pub train_samples: usize,
    /// Weight draws per window when scoring the validation split (Bayesian).
    pub val_samples: usize,
    pub likelihood: LikelihoodScale,
    /// Stop when validation loss has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Directory receiving `best.json` and `last.json` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            train_samples: 1,
            val_samples: uncertainty::DEFAULT_EVAL_SAMPLES,
            likelihood: LikelihoodScale::default(),
            patience: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::ConfigInvalid(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 {
            return bad("epochs, batch size and train samples must be positive");
        }
        if self.val_samples < 2 {
            return bad("val samples must be at least 2");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        Ok(())
    }

    /// Multiplier of the batch-mean cross-entropy for a batch of `m`
    /// (Bayesian mode; deterministic training always uses the batch mean).
    pub fn nll_scale(&self, m: usize) -> f64 {
        match self.likelihood {
            LikelihoodScale::BatchMean => 1.0,
            LikelihoodScale::DatasetSum => m as f64,
        }
    }
}

/// Per-epoch record. Column order of the CSV export follows the field
/// order: `epoch,train_loss,train_acc,val_loss,val_acc,kl,nll`.
///
/// `train_loss`, `kl` and `nll` are means over the epoch's batches, so
/// `train_loss == kl_weight·kl + nll` (deterministic: `kl = 0`). Training
/// accuracy uses the predictions of the training forward passes.
/// `val_loss` is `kl_weight·kl + nll_scale·CE`, with `CE` the mean
/// cross-entropy of the validation predictive distribution (MC-averaged
/// probabilities in Bayesian mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub kl: f64,
    pub nll: f64,
}

pub const CURVE_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,kl,nll";

pub fn categorical_accuracy(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<f64, TrainError> {
    if preds.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Scores of a model on a labeled window set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    /// Mean cross-entropy of the predictive distribution.
    pub cross_entropy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; C]; C],
}

/// Evaluate with point predictions (deterministic) or `samples` MC draws
/// (Bayesian).
pub fn evaluate(
    state: &ModelState,
    windows: &[FeatureWindow],
    samples: usize,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let refs: Vec<&FeatureWindow> = windows.iter().collect();
    let summaries = uncertainty::predict_batch(state, &refs, samples, seed)?;
    let mut confusion = [[0u64; C]; C];
    let mut ce = 0.0;
    let mut hits = 0usize;
    for (w, s) in windows.iter().zip(&summaries) {
        confusion[w.label.index()][s.predicted.index()] += 1;
        hits += usize::from(w.label == s.predicted);
        ce -= s.mean[w.label.index()].max(f64::MIN_POSITIVE).ln();
    }
    let n = windows.len() as f64;
    Ok(EvalReport {
        count: windows.len(),
        accuracy: hits as f64 / n,
        cross_entropy: ce / n,
        confusion,
    })
}

/// Result of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: ModelState,
    /// State at the epoch with the highest validation accuracy (earliest on
    /// ties).
    pub best: ModelState,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

fn flat_params(state: &ModelState) -> Vec<Tensor> {
    match &state.params {
        Params::Deterministic(ts) => ts.clone(),
        Params::Bayesian(ps) => ps.iter().flat_map(|p| [p.mu.clone(), p.rho.clone()]).collect(),
    }
}

fn store_params(state: &mut ModelState, flat: Vec<Tensor>) {
    state.params = match state.mode() {
        Mode::Deterministic => Params::Deterministic(flat),
        Mode::Bayesian => {
            let mut it = flat.into_iter();
            let mut ps = Vec::new();
            while let (Some(mu), Some(rho)) = (it.next(), it.next()) {
                ps.push(GaussianParam { mu, rho });
            }
            Params::Bayesian(ps)
        }
    };
}

struct StepResult {
    loss: f64,
    kl: f64,
    nll: f64,
    grads: Vec<Tensor>,
    preds: Vec<ClassLabel>,
}

fn numerical(e: &TensorError) -> bool {
    matches!(e, TensorError::Numerical { .. })
}

/// One forward/backward pass over a batch. `Ok(None)` means a non-finite
/// value appeared.
fn step(
    state: &ModelState,
    params: &[Tensor],
    batch: Tensor,
    labels: &[usize],
    weights: ElboWeights,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<Option<StepResult>, TrainError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let x = g.input(batch);
    let spec = &state.spec;
    let built = match state.mode() {
        Mode::Deterministic => (|| {
            let logp = forward_graph(&mut g, spec, &vars, x)?;
            let ce = g.cross_entropy(logp, labels)?;
            Ok::<_, TensorError>((ce, 0.0, g.value(ce).item(), vec![logp]))
        })(),
        Mode::Bayesian => {
            let theta: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
            let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(noise_seed));
            match elbo_mc(
                &mut g,
                &theta,
                &state.prior,
                &mut noise,
                cfg.train_samples,
                weights,
                labels,
                |g, ws| forward_graph(g, spec, ws, x),
            ) {
                Ok(t) => Ok((t.loss, t.kl, t.nll, t.log_probs)),
                Err(VariationalError::Tensor(e)) => Err(e),
                Err(e) => return Err(TrainError::ConfigInvalid(e.to_string())),
            }
        }
    };
    let (loss, kl, nll, log_probs) = match built {
        Ok(b) => b,
        Err(e) if numerical(&e) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Ok(None);
    }
    let mut grads = match g.backward(loss) {
        Ok(gr) => gr,
        Err(e) if numerical(&e) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
    if !grads.iter().all(Tensor::all_finite) {
        return Ok(None);
    }
    // Predictions of the first draw.
    let preds = predict_classes(g.value(log_probs[0]));
    Ok(Some(StepResult {
        loss: loss_value,
        kl,
        nll,
        grads,
        preds,
    }))
}

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0000;
const SHUFFLE_STREAM: u64 = 0x7368_7566_0000_0000;
const VAL_STREAM: u64 = 0x7661_6c00_0000_0000;

/// Train with no progress callback.
pub fn train(
    state: ModelState,
    train_set: &[FeatureWindow],
    val_set: &[FeatureWindow],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(state, train_set, val_set, cfg, |_| true)
}

/// Train, calling `on_epoch` after every epoch; returning `false` from it
/// cancels the run.
pub fn train_with<F>(
    mut state: ModelState,
    train_set: &[FeatureWindow],
    val_set: &[FeatureWindow],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochMetrics) -> bool,
{
    cfg.validate()?;
    state.spec.param_shapes()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let want = state.spec.input[1];
    if let Some(w) = train_set.iter().chain(val_set).find(|w| w.window_len() != want) {
        return Err(TrainError::ShapeMismatch(format!(
            "window length {} but model expects {want}",
            w.window_len()
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let kl_weight = match state.mode() {
        Mode::Deterministic => 0.0,
        Mode::Bayesian => 1.0 / batches as f64,
    };
    let bayesian = state.mode() == Mode::Bayesian;
    let nll_scale = |m: usize| if bayesian { cfg.nll_scale(m) } else { 1.0 };
    let mut params = flat_params(&state);
    let mut adam = AdamState::new(&params);
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut since_improved = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_index = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum, mut nll_sum, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_tensor(idx.iter().map(|&i| &train_set[i]))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label.index()).collect();
            let weights = ElboWeights {
                kl_weight,
                nll_scale: nll_scale(idx.len()),
            };
            let noise_seed = crate::derive_seed(cfg.seed ^ NOISE_STREAM, step_index);
            step_index += 1;
            let Some(r) = step(&state, &params, batch, &labels, weights, cfg, noise_seed)? else {
                return Err(TrainError::Numerical {
                    epoch,
                    batch: b,
                    last_good: Box::new(state),
                    metrics,
                });
            };
            adam_step(&mut params, &r.grads, &mut adam, &cfg.adam)?;
            if !params.iter().all(Tensor::all_finite) {
                return Err(TrainError::Numerical {
                    epoch,
                    batch: b,
                    last_good: Box::new(state),
                    metrics,
                });
            }
            loss_sum += r.loss;
            kl_sum += r.kl;
            nll_sum += r.nll;
            hits += r.preds.iter().zip(&labels).filter(|(p, &l)| p.index() == l).count();
        }
        store_params(&mut state, params.clone());
        state.epoch += 1;

        let nb = batches as f64;
        let kl = kl_sum / nb;
        let val = evaluate(
            &state,
            val_set,
            cfg.val_samples,
            crate::derive_seed(cfg.seed ^ VAL_STREAM, epoch as u64),
        )?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / nb,
            train_acc: hits as f64 / n as f64,
            val_loss: kl_weight * kl + nll_scale(cfg.batch_size.min(n)) * val.cross_entropy,
            val_acc: val.accuracy,
            kl,
            nll: nll_sum / nb,
        };
        metrics.push(m);
        if best.as_ref().is_none_or(|(acc, _, _)| m.val_acc > *acc) {
            best = Some((m.val_acc, epoch, state.clone()));
            if let Some(dir) = &cfg.checkpoint_dir {
                crate::checkpoint::Checkpoint::new(state.clone(), Some(cfg.clone()), metrics.clone())
                    .write_file(&dir.join("best.json"))
                    .map_err(|e| TrainError::Format(e.to_string()))?;
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            crate::checkpoint::Checkpoint::new(state.clone(), Some(cfg.clone()), metrics.clone())
                .write_file(&dir.join("last.json"))
                .map_err(|e| TrainError::Format(e.to_string()))?;
        }
        if !on_epoch(&m) {
            return Err(TrainError::Cancelled);
        }
        if m.val_loss < best_val_loss {
            best_val_loss = m.val_loss;
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        if cfg.patience.is_some_and(|p| since_improved >= p) {
            break;
        }
    }
    let (_, best_epoch, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: state,
        best: best_state,
        best_epoch,
        metrics,
    })
}

/// Metrics as CSV text with [`CURVE_HEADER`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn curves_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.kl, m.nll
        );
    }
    s
}

pub fn parse_curves(text: &str) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(TrainError::Format("missing or wrong header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(TrainError::Format(format!("expected 7 fields in {l:?}")));
            }
            let num = |i: usize| {
                f[i].parse::<f64>()
                    .map_err(|_| TrainError::Format(format!("bad number {:?}", f[i])))
            };
            Ok(EpochMetrics {
                epoch: f[0]
                    .parse()
                    .map_err(|_| TrainError::Format(format!("bad epoch {:?}", f[0])))?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                kl: num(5)?,
                nll: num(6)?,
            })
        })
        .collect()
}

/// Write `metrics.csv`, `accuracy.svg`, `loss.svg` and `objective.svg`
/// into `dir`; returns the written paths.
pub fn export_curves(metrics: &[EpochMetrics], dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    if metrics.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    std::fs::create_dir_all(dir)?;
    let xs: Vec<f64> = metrics.iter().map(|m| m.epoch as f64).collect();
    let series = |name: &str, f: fn(&EpochMetrics) -> f64| Series {
        name: name.to_string(),
        points: xs.iter().copied().zip(metrics.iter().map(f)).collect(),
    };
    let files = [
        ("metrics.csv", curves_csv(metrics)),
        (
            "accuracy.svg",
            line_chart(
                "Categorical accuracy",
                "epoch",
                "accuracy",
                &[series("train", |m| m.train_acc), series("val", |m| m.val_acc)],
            ),
        ),
        (
            "loss.svg",
            line_chart(
                "Loss",
                "epoch",
                "loss",
                &[series("train", |m| m.train_loss), series("val", |m| m.val_loss)],
            ),
        ),
        (
            "objective.svg",
            line_chart(
                "Objective terms",
                "epoch",
                "value",
                &[series("kl", |m| m.kl), series("nll", |m| m.nll)],
            ),
        ),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}
