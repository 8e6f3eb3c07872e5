//! Browser explorers over the `bayescan` core.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`
//! and serve `crates/demo/www/`.
//!
//! - [`kl_gaussian`], [`kl_grid`], [`kl_monte_carlo`]: one posterior weight
//!   against the prior
//! - [`WindowViewer`]: the bit matrix a window of synthetic traffic encodes to
//! - [`TriageExplorer`]: flag rates of a prediction export under `τ`, `η`

use bayescan::autodiff::Tensor;
use bayescan::can::{synth_capture, AttackKind, CandumpLine, SynthProfile};
use bayescan::dataset::SyntheticDatasetConfig;
use bayescan::features::{window_stream, LabelRule};
use bayescan::uncertainty::{triage_decide, FlagReason, PredictionRecord, PredictiveSummary};
use bayescan::variational::{kl_analytic, sample_weights, softplus_inv, GaussianParam, PriorSpec};
use bayescan::{CanFrame, ClassLabel, FeatureWindow, TriagePolicy, WindowConfig, FRAME_BITS};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn scalar_param(mu: f64, sigma: f64) -> Result<GaussianParam, String> {
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(format!("need finite mu and sigma > 0, got mu={mu} sigma={sigma}"));
    }
    let t = |v| Tensor::new(vec![1], vec![v]).expect("one element");
    GaussianParam::new(t(mu), t(softplus_inv(sigma))).map_err(|e| e.to_string())
}

fn prior(sigma: f64) -> Result<PriorSpec, String> {
    let p = PriorSpec::IsotropicGaussian { sigma };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p²))` for one weight.
#[wasm_bindgen]
pub fn kl_gaussian(mu: f64, sigma: f64, prior_sigma: f64) -> Result<f64, String> {
    Ok(kl_analytic(&scalar_param(mu, sigma)?, &prior(prior_sigma)?))
}

/// KL over an `n × n` grid, row-major with `σ` along rows (from
/// `sigma_min` up) and `μ` along columns.
#[wasm_bindgen]
pub fn kl_grid(
    mu_min: f64,
    mu_max: f64,
    sigma_min: f64,
    sigma_max: f64,
    n: usize,
    prior_sigma: f64,
) -> Result<Vec<f64>, String> {
    if n < 2
        || mu_max.partial_cmp(&mu_min) != Some(std::cmp::Ordering::Greater)
        || sigma_max.partial_cmp(&sigma_min) != Some(std::cmp::Ordering::Greater)
    {
        return Err("need n >= 2 and increasing ranges".into());
    }
    let at = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(kl_gaussian(
                at(mu_min, mu_max, c),
                at(sigma_min, sigma_max, r),
                prior_sigma,
            )?);
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate `mean(log q(w) − log p(w))` over reparameterized
/// draws; approaches [`kl_gaussian`] as `samples` grows.
#[wasm_bindgen]
pub fn kl_monte_carlo(mu: f64, sigma: f64, prior_sigma: f64, samples: usize, seed: u64) -> Result<f64, String> {
    if samples == 0 {
        return Err("samples must be positive".into());
    }
    let (theta, p) = (scalar_param(mu, sigma)?, prior(prior_sigma)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..samples)
        .map(|_| {
            let s = sample_weights(&theta, &p, &mut rng);
            s.log_q - s.log_prior
        })
        .sum();
    Ok(total / samples as f64)
}

fn profile(traffic: &str, frames: usize) -> Result<SynthProfile, String> {
    let label: ClassLabel = traffic
        .parse()
        .map_err(|e: bayescan::can::UnknownLabel| e.to_string())?;
    let bg = 2000.0;
    Ok(match label {
        ClassLabel::Normal => SynthProfile::normal(frames as f64 / bg, bg),
        attack => {
            let kind = AttackKind::ALL[attack.index() - 1];
            let rate = SyntheticDatasetConfig::default().attack_rates_hz[attack.index() - 1];
            SynthProfile::single(kind, frames as f64 / (bg + rate), bg, rate)
        }
    })
}

/// Consecutive windows of a synthetic capture and their bit matrices.
#[wasm_bindgen]
pub struct WindowViewer {
    frames: Vec<CanFrame>,
    windows: Vec<FeatureWindow>,
}

#[wasm_bindgen]
impl WindowViewer {
    /// `traffic` is a class name or code (`normal`, `dos`, `fuzzing`,
    /// `rpm`, `gear`).
    #[wasm_bindgen(constructor)]
    pub fn new(traffic: &str, window_len: usize, count: usize, seed: u64) -> Result<WindowViewer, String> {
        if window_len == 0 || count == 0 {
            return Err("window length and count must be positive".into());
        }
        let frames = synth_capture(&profile(traffic, window_len * (count + 1))?, seed).map_err(|e| e.to_string())?;
        let cfg = WindowConfig {
            window_len,
            stride: window_len,
            label_rule: LabelRule::AnyInjected,
        };
        let mut windows = window_stream(&frames, &cfg, 0).map_err(|e| e.to_string())?;
        windows.truncate(count);
        Ok(WindowViewer { frames, windows })
    }

    pub fn count(&self) -> usize {
        self.windows.len()
    }

    pub fn rows(&self) -> usize {
        self.windows.first().map_or(0, |w| w.window_len())
    }

    pub fn cols() -> usize {
        FRAME_BITS
    }

    /// Row-major `W × 93` bits of window `index`.
    pub fn bits(&self, index: usize) -> Vec<u8> {
        self.windows.get(index).map(|w| w.bits().to_vec()).unwrap_or_default()
    }

    pub fn label(&self, index: usize) -> Option<u8> {
        self.windows.get(index).map(|w| w.label.code())
    }

    /// Frames of window `index` as candump lines.
    pub fn frames_text(&self, index: usize) -> String {
        let Some(w) = self.windows.get(index) else {
            return String::new();
        };
        let start = w.origin.start as usize;
        self.frames[start..start + w.window_len()]
            .iter()
            .map(|f| {
                CandumpLine {
                    iface: "can0".into(),
                    frame: *f,
                }
                .to_string()
                    + "\n"
            })
            .collect()
    }
}

/// Reason bits returned by [`TriageExplorer::reasons`].
pub const LOW_MAX_PROB: u8 = 1;
pub const HIGH_ENTROPY: u8 = 2;

/// Re-scores a prediction export under candidate thresholds.
#[wasm_bindgen]
pub struct TriageExplorer {
    summaries: Vec<PredictiveSummary>,
    truth: Vec<Option<ClassLabel>>,
}

#[wasm_bindgen]
impl TriageExplorer {
    /// `export` holds one prediction JSON object per line.
    #[wasm_bindgen(constructor)]
    pub fn new(export: &str) -> Result<TriageExplorer, String> {
        let mut summaries = Vec::new();
        let mut truth = Vec::new();
        for (i, line) in export.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: PredictionRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            summaries.push(PredictiveSummary::point(r.mean).map_err(|e| format!("line {}: {e}", i + 1))?);
            truth.push(r.true_label);
        }
        Ok(TriageExplorer { summaries, truth })
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    /// Interleaved `(max_prob, entropy)` per window, for a scatter plot.
    pub fn points(&self) -> Vec<f64> {
        self.summaries.iter().flat_map(|s| [s.max_prob(), s.entropy]).collect()
    }

    /// Per-window reason bits under `(τ, η)`; 0 means accepted.
    pub fn reasons(&self, tau: f64, eta: f64) -> Result<Vec<u8>, String> {
        let policy = TriagePolicy::new(tau, eta).map_err(|e| e.to_string())?;
        Ok(self
            .summaries
            .iter()
            .map(|s| {
                triage_decide(s, &policy).reasons().iter().fold(0, |acc, r| {
                    acc | match r {
                        FlagReason::LowMaxProb => LOW_MAX_PROB,
                        FlagReason::HighEntropy => HIGH_ENTROPY,
                    }
                })
            })
            .collect())
    }

    pub fn flagged(&self, tau: f64, eta: f64) -> Result<usize, String> {
        Ok(self.reasons(tau, eta)?.iter().filter(|r| **r != 0).count())
    }

    /// Windows accepted under `(τ, η)` whose prediction disagrees with
    /// their true label: the errors triage would let through.
    pub fn missed_errors(&self, tau: f64, eta: f64) -> Result<usize, String> {
        let reasons = self.reasons(tau, eta)?;
        Ok(self
            .summaries
            .iter()
            .zip(&self.truth)
            .zip(reasons)
            .filter(|((s, t), r)| *r == 0 && t.is_some_and(|t| t != s.predicted))
            .count())
    }
}
