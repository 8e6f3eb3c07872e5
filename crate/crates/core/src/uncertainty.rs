//! Monte-Carlo predictive summaries and the triage policy.
//!
//! A Bayesian model is queried `S` times with independent weight draws.
//! The `S` softmax rows are summarized by their mean, per-class sample
//! standard deviation, the entropy of the mean (nats) and the Pearson
//! correlation between class columns. Mean probability alone overstates
//! confidence, so every summary carries all of these together.

use crate::autodiff::Tensor;
use crate::can::ClassLabel;
use crate::features::FeatureWindow;
use crate::model::{batch_tensor, Mode, ModelError, ModelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const C: usize = ClassLabel::COUNT;
/// Tolerance on row sums of probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Default number of MC draws at evaluation time.
pub const DEFAULT_EVAL_SAMPLES: usize = 30;
/// Windows per forward pass in batched prediction.
const CHUNK: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid probabilities: {0}")]
    InvalidProbs(String),
    #[error("MC requires Bayesian mode")]
    ModeMismatch,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    /// Number of MC samples `S`.
    pub samples: usize,
    /// `S` softmax rows.
    pub probs: Vec<[f64; C]>,
    pub mean: [f64; C],
    /// Unbiased per-class sample standard deviation (0 when `S = 1`).
    pub std: [f64; C],
    /// Entropy of `mean`, in nats.
    pub entropy: f64,
    pub predicted: ClassLabel,
    pub corr: [[f64; C]; C],
}

fn check_row(row: &[f64; C]) -> Result<(), UncertaintyError> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(UncertaintyError::InvalidProbs(format!("{row:?} sums to {s}")));
    }
    Ok(())
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Pearson correlation between the class columns of an `S×5` matrix.
/// Zero-variance columns correlate 0 with everything else and 1 with
/// themselves.
pub fn correlation_matrix(probs: &[[f64; C]]) -> Result<[[f64; C]; C], UncertaintyError> {
    let s = probs.len();
    if s < 2 {
        return Err(UncertaintyError::TooFewSamples(s));
    }
    let n = s as f64;
    let mut mean = [0.0; C];
    for row in probs {
        for k in 0..C {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; C]; C];
    for row in probs {
        for i in 0..C {
            let di = row[i] - mean[i];
            for j in i..C {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    let mut corr = [[0.0; C]; C];
    for i in 0..C {
        corr[i][i] = 1.0;
        for j in i + 1..C {
            let denom = (cov[i][i] * cov[j][j]).sqrt();
            let r = if cov[i][i] > 0.0 && cov[j][j] > 0.0 && denom > 0.0 {
                (cov[i][j] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            corr[i][j] = r;
            corr[j][i] = r;
        }
    }
    Ok(corr)
}

impl PredictiveSummary {
    /// Summarize `S ≥ 2` softmax rows.
    pub fn from_samples(probs: Vec<[f64; C]>) -> Result<Self, UncertaintyError> {
        let s = probs.len();
        if s < 2 {
            return Err(UncertaintyError::TooFewSamples(s));
        }
        probs.iter().try_for_each(check_row)?;
        let n = s as f64;
        let mut mean = [0.0; C];
        for row in &probs {
            for k in 0..C {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; C];
        for k in 0..C {
            let ss: f64 = probs.iter().map(|r| (r[k] - mean[k]).powi(2)).sum();
            std[k] = (ss / (n - 1.0)).sqrt();
        }
        let corr = correlation_matrix(&probs)?;
        Ok(Self::assemble(probs, mean, std, corr))
    }

    /// Summary of a single deterministic prediction: zero spread and the
    /// zero-variance correlation (identity).
    pub fn point(probs: [f64; C]) -> Result<Self, UncertaintyError> {
        check_row(&probs)?;
        let mut corr = [[0.0; C]; C];
        (0..C).for_each(|i| corr[i][i] = 1.0);
        Ok(Self::assemble(vec![probs], probs, [0.0; C], corr))
    }

    fn assemble(probs: Vec<[f64; C]>, mean: [f64; C], std: [f64; C], corr: [[f64; C]; C]) -> Self {
        PredictiveSummary {
            samples: probs.len(),
            entropy: entropy(&mean),
            predicted: ClassLabel::ALL[argmax(&mean)],
            probs,
            mean,
            std,
            corr,
        }
    }

    pub fn max_prob(&self) -> f64 {
        self.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Probability rows of one `[n×5]` log-probability tensor.
fn prob_rows(log_probs: &Tensor) -> Vec<[f64; C]> {
    log_probs
        .rows()
        .map(|r| {
            let mut p = [0.0; C];
            for (d, &l) in p.iter_mut().zip(r) {
                *d = l.exp();
            }
            // Renormalize away exp/log rounding.
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            p
        })
        .collect()
}

/// Seed of the `s`-th weight draw under root seed `seed`.
pub fn sample_seed(seed: u64, s: usize) -> u64 {
    crate::derive_seed(seed, s as u64)
}

/// MC predictive summaries for a batch of windows. Draw `s` uses the
/// weights seeded by [`sample_seed`]`(seed, s)` for every window, so a
/// window's summary does not depend on which other windows share the
/// batch.
pub fn mc_predict_batch(
    state: &ModelState,
    windows: &[&FeatureWindow],
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveSummary>, UncertaintyError> {
    if state.mode() != Mode::Bayesian {
        return Err(UncertaintyError::ModeMismatch);
    }
    if samples < 2 {
        return Err(UncertaintyError::TooFewSamples(samples));
    }
    let batches = windows
        .chunks(CHUNK)
        .map(|chunk| batch_tensor(chunk.iter().copied()))
        .collect::<Result<Vec<_>, _>>()?;
    // Draws are independent given their seeds, so they run in parallel and
    // are collected in draw order.
    let draws: Vec<Vec<[f64; C]>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, s));
            let ws: Vec<Tensor> = state.sample_weights(&mut rng)?.into_iter().map(|w| w.w).collect();
            let mut out = Vec::with_capacity(windows.len());
            for batch in &batches {
                out.extend(prob_rows(&state.forward(batch, Some(&ws))?));
            }
            Ok(out)
        })
        .collect::<Result<_, ModelError>>()?;
    let mut rows: Vec<Vec<[f64; C]>> = vec![Vec::with_capacity(samples); windows.len()];
    for draw in draws {
        for (row, p) in rows.iter_mut().zip(draw) {
            row.push(p);
        }
    }
    rows.into_iter().map(PredictiveSummary::from_samples).collect()
}

/// MC predictive summary for one window.
pub fn mc_predict(
    state: &ModelState,
    window: &FeatureWindow,
    samples: usize,
    seed: u64,
) -> Result<PredictiveSummary, UncertaintyError> {
    Ok(mc_predict_batch(state, &[window], samples, seed)?.remove(0))
}

/// Point summaries from a deterministic model (or from posterior means).
pub fn point_predict_batch(
    state: &ModelState,
    windows: &[&FeatureWindow],
) -> Result<Vec<PredictiveSummary>, UncertaintyError> {
    let weights = state.mean_weights();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let batch = batch_tensor(chunk.iter().copied())?;
        let lp = state.forward(&batch, Some(&weights))?;
        for p in prob_rows(&lp) {
            out.push(PredictiveSummary::point(p)?);
        }
    }
    Ok(out)
}

/// MC summaries for a Bayesian model, point summaries otherwise.
pub fn predict_batch(
    state: &ModelState,
    windows: &[&FeatureWindow],
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveSummary>, UncertaintyError> {
    match state.mode() {
        Mode::Bayesian => mc_predict_batch(state, windows, samples, seed),
        Mode::Deterministic => point_predict_batch(state, windows),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriagePolicy {
    /// Flag when the largest mean probability is below this (`τ`).
    pub max_prob_threshold: f64,
    /// Flag when predictive entropy exceeds this, in nats (`η`).
    pub entropy_threshold: f64,
}

impl Default for TriagePolicy {
    fn default() -> Self {
        TriagePolicy {
            max_prob_threshold: 0.9,
            entropy_threshold: 0.5,
        }
    }
}

impl TriagePolicy {
    pub fn new(max_prob_threshold: f64, entropy_threshold: f64) -> Result<Self, UncertaintyError> {
        let p = TriagePolicy {
            max_prob_threshold,
            entropy_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let tau = self.max_prob_threshold;
        let eta = self.entropy_threshold;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(UncertaintyError::InvalidPolicy(format!("tau {tau} outside (0, 1]")));
        }
        if !(0.0..=(C as f64).ln()).contains(&eta) {
            return Err(UncertaintyError::InvalidPolicy(format!("eta {eta} outside [0, ln 5]")));
        }
        Ok(())
    }

    /// The flagging predicate on its own.
    pub fn flags(&self, summary: &PredictiveSummary) -> bool {
        summary.max_prob() < self.max_prob_threshold || summary.entropy > self.entropy_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    LowMaxProb,
    HighEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum TriageDecision {
    Accept {
        predicted: ClassLabel,
    },
    Flag {
        predicted: ClassLabel,
        reasons: Vec<FlagReason>,
    },
}

impl TriageDecision {
    pub fn is_flagged(&self) -> bool {
        matches!(self, TriageDecision::Flag { .. })
    }

    pub fn reasons(&self) -> &[FlagReason] {
        match self {
            TriageDecision::Accept { .. } => &[],
            TriageDecision::Flag { reasons, .. } => reasons,
        }
    }
}

pub fn triage_decide(summary: &PredictiveSummary, policy: &TriagePolicy) -> TriageDecision {
    let mut reasons = Vec::new();
    if summary.max_prob() < policy.max_prob_threshold {
        reasons.push(FlagReason::LowMaxProb);
    }
    if summary.entropy > policy.entropy_threshold {
        reasons.push(FlagReason::HighEntropy);
    }
    if reasons.is_empty() {
        TriageDecision::Accept {
            predicted: summary.predicted,
        }
    } else {
        TriageDecision::Flag {
            predicted: summary.predicted,
            reasons,
        }
    }
}

/// One row of the prediction export shared by the CLI and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub window_id: u64,
    pub predicted: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<ClassLabel>,
    pub mean: [f64; C],
    pub std: [f64; C],
    pub entropy: f64,
    pub corr: [[f64; C]; C],
    pub flagged: bool,
    pub reasons: Vec<FlagReason>,
}

impl PredictionRecord {
    pub fn new(
        window_id: u64,
        summary: &PredictiveSummary,
        decision: &TriageDecision,
        true_label: Option<ClassLabel>,
    ) -> Self {
        PredictionRecord {
            window_id,
            predicted: summary.predicted,
            true_label,
            mean: summary.mean,
            std: summary.std,
            entropy: summary.entropy,
            corr: summary.corr,
            flagged: decision.is_flagged(),
            reasons: decision.reasons().to_vec(),
        }
    }
}
