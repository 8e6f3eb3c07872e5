//! Mean-field Gaussian variational posterior over network weights.
//!
//! Each weight tensor carries `θ = (μ, ρ)` with `σ = softplus(ρ)`, so
//! `q(w|θ) = Π N(w; μ, σ²)`. Training minimizes the expectation
//! `E_q[log q(w|θ) − log P(D|w) − log P(w)]`, estimated by Monte Carlo with
//! reparameterized draws `w = μ + σ⊙ε`, `ε ~ N(0, I)`, so gradients reach
//! `(μ, ρ)` through ordinary backpropagation. The closed-form
//! `KL(q‖P(w))` for a Gaussian prior is kept alongside as a check on the
//! estimator.

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, PartialEq)]
pub enum VariationalError {
    #[error("mu shape {mu:?} differs from rho shape {rho:?}")]
    ShapeMismatch { mu: Vec<usize>, rho: Vec<usize> },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `ln(1 + e^ρ)` without overflow or underflow to zero.
pub fn softplus(rho: f64) -> f64 {
    rho.max(0.0) + (-rho.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `σ > 0`.
pub fn softplus_inv(sigma: f64) -> f64 {
    // ln(e^σ − 1) = σ + ln(1 − e^−σ)
    sigma + (-(-sigma).exp()).ln_1p()
}

/// Log-density of `N(x; mu, sigma²)`.
pub fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -HALF_LN_2PI - sigma.ln() - 0.5 * z * z
}

/// Variational parameters of one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParam {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianParam {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self, VariationalError> {
        if mu.shape() != rho.shape() {
            return Err(VariationalError::ShapeMismatch {
                mu: mu.shape().to_vec(),
                rho: rho.shape().to_vec(),
            });
        }
        Ok(GaussianParam { mu, rho })
    }

    /// `μ ~ U(−mu_range, mu_range)`, `ρ = rho` everywhere.
    pub fn init<R: Rng>(shape: &[usize], mu_range: f64, rho: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mu = (0..n)
            .map(|_| {
                if mu_range > 0.0 {
                    rng.random_range(-mu_range..mu_range)
                } else {
                    0.0
                }
            })
            .collect();
        GaussianParam {
            mu: Tensor::new(shape.to_vec(), mu).expect("shape product"),
            rho: Tensor::full(shape, rho),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }
}

/// The weight prior `P(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    IsotropicGaussian { sigma: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::IsotropicGaussian { sigma: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), VariationalError> {
        match *self {
            PriorSpec::IsotropicGaussian { sigma } if sigma.is_finite() && sigma > 0.0 => Ok(()),
            PriorSpec::IsotropicGaussian { sigma } => {
                Err(VariationalError::InvalidPrior(format!("sigma_p = {sigma} must be > 0")))
            }
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            PriorSpec::IsotropicGaussian { sigma } => sigma,
        }
    }

    pub fn log_density(&self, w: &Tensor) -> f64 {
        let s = self.sigma();
        w.data().iter().map(|&x| log_normal(x, 0.0, s)).sum()
    }
}

/// One reparameterized draw of a weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub epsilon: Tensor,
    pub w: Tensor,
    pub log_q: f64,
    pub log_prior: f64,
}

/// Draw `w = μ + σ⊙ε` with `ε` from `rng`.
pub fn sample_weights<R: Rng>(theta: &GaussianParam, prior: &PriorSpec, rng: &mut R) -> WeightSample {
    let eps = standard_normal(theta.shape(), rng);
    sample_weights_with(theta, prior, eps).expect("epsilon shaped like theta")
}

/// Deterministic reparameterization from a supplied `ε`.
pub fn sample_weights_with(
    theta: &GaussianParam,
    prior: &PriorSpec,
    epsilon: Tensor,
) -> Result<WeightSample, VariationalError> {
    if epsilon.shape() != theta.shape() {
        return Err(VariationalError::ShapeMismatch {
            mu: theta.shape().to_vec(),
            rho: epsilon.shape().to_vec(),
        });
    }
    let sigma = theta.sigma();
    let mut w = theta.mu.clone();
    for ((wi, &s), &e) in w.data_mut().iter_mut().zip(sigma.data()).zip(epsilon.data()) {
        *wi += s * e;
    }
    let log_q = w
        .data()
        .iter()
        .zip(theta.mu.data())
        .zip(sigma.data())
        .map(|((&x, &m), &s)| log_normal(x, m, s))
        .sum();
    let log_prior = prior.log_density(&w);
    Ok(WeightSample {
        epsilon,
        w,
        log_q,
        log_prior,
    })
}

pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Closed-form `KL(q(w|θ) ‖ N(0, σ_p²))`:
/// `Σ ln(σ_p/σ) + (σ² + μ²)/(2σ_p²) − ½`.
pub fn kl_analytic(theta: &GaussianParam, prior: &PriorSpec) -> f64 {
    let sp = prior.sigma();
    theta
        .mu
        .data()
        .iter()
        .zip(theta.rho.data())
        .map(|(&m, &r)| {
            let s = softplus(r);
            (sp / s).ln() + (s * s + m * m) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// Source of `ε` for reparameterized draws.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor;
}

/// Standard-normal noise from a seeded generator.
pub struct GaussianNoise<R: Rng>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        standard_normal(shape, &mut self.0)
    }
}

/// `ε ≡ 0`: every draw is the posterior mean.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// Replays a fixed list of noise tensors in order (frozen-noise gradient
/// checks).
pub struct ReplayNoise {
    tensors: Vec<Tensor>,
    next: usize,
}

impl ReplayNoise {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ReplayNoise { tensors, next: 0 }
    }
}

impl NoiseSource for ReplayNoise {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        let t = self.tensors[self.next % self.tensors.len()].clone();
        self.next += 1;
        assert_eq!(t.shape(), shape, "replayed noise shape");
        t
    }
}

/// Graph nodes of one reparameterized weight tensor.
#[derive(Debug, Clone, Copy)]
pub struct GraphWeights {
    pub w: Var,
    pub log_q: Var,
    pub log_prior: Var,
}

/// Build `w = μ + softplus(ρ)⊙ε` and the scalar `log q(w|θ)`, `log P(w)`
/// inside `g`. Gradients flow to `mu` and `rho` along every path.
pub fn reparameterize(
    g: &mut Graph,
    mu: Var,
    rho: Var,
    epsilon: Tensor,
    prior: &PriorSpec,
) -> Result<GraphWeights, TensorError> {
    // log q(w|θ) = Σ[−½ln2π − ln σ − ½((w − μ)/σ)²] and (w − μ)/σ = ε.
    let constant = -(epsilon.len() as f64) * HALF_LN_2PI - 0.5 * epsilon.data().iter().map(|e| e * e).sum::<f64>();
    let sigma = g.softplus(rho)?;
    let log_sigma = g.log(sigma)?;
    let log_sigma_sum = g.sum(log_sigma)?;
    let neg = g.scale(log_sigma_sum, -1.0)?;
    let log_q = g.add_scalar(neg, constant)?;
    let w = g.gaussian_sample(mu, sigma, epsilon)?;
    let log_prior = g.normal_log_density(w, prior.sigma())?;
    Ok(GraphWeights { w, log_q, log_prior })
}

/// Scalar values of the Monte-Carlo variational objective.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    /// Differentiable objective.
    pub loss: Var,
    /// Mean over samples of `log q − log P(w)` (unweighted).
    pub kl: f64,
    /// Mean over samples of the scaled negative log-likelihood term.
    pub nll: f64,
    /// Log-probabilities produced by each sample's forward pass.
    pub log_probs: Vec<Var>,
}

/// Weights of the two objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboWeights {
    /// Multiplier of `log q − log P(w)`; `1/M` for `M` minibatches.
    pub kl_weight: f64,
    /// Multiplier of the batch-mean cross-entropy.
    pub nll_scale: f64,
}

/// Monte-Carlo estimate of the variational loss
///
/// `(1/S) Σ_s [ kl_weight·(log q(w_s|θ) − log P(w_s)) + nll_scale·CE(batch; w_s) ]`
///
/// `theta` lists the `(μ, ρ)` leaves of every weight tensor; `forward`
/// maps one set of sampled weight nodes to `[n×C]` log-probabilities.
#[allow(clippy::too_many_arguments)]
pub fn elbo_mc<F>(
    g: &mut Graph,
    theta: &[(Var, Var)],
    prior: &PriorSpec,
    noise: &mut dyn NoiseSource,
    samples: usize,
    weights: ElboWeights,
    labels: &[usize],
    mut forward: F,
) -> Result<ElboTerms, VariationalError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if samples == 0 {
        return Err(VariationalError::InvalidArgument("need at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&weights.kl_weight) {
        return Err(VariationalError::InvalidArgument(format!(
            "kl_weight {} outside [0, 1]",
            weights.kl_weight
        )));
    }
    if theta.is_empty() {
        return Err(VariationalError::InvalidArgument("no variational parameters".into()));
    }
    prior.validate()?;
    let mut total: Option<Var> = None;
    let (mut kl_acc, mut nll_acc) = (0.0, 0.0);
    let mut log_probs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut ws = Vec::with_capacity(theta.len());
        let mut kl_s: Option<Var> = None;
        for &(mu, rho) in theta {
            let eps = noise.draw(g.shape(mu));
            let gw = reparameterize(g, mu, rho, eps, prior)?;
            let d = g.sub(gw.log_q, gw.log_prior)?;
            kl_s = Some(match kl_s {
                Some(acc) => g.add(acc, d)?,
                None => d,
            });
            ws.push(gw.w);
        }
        let kl_s = kl_s.expect("theta non-empty");
        let logp = forward(g, &ws)?;
        log_probs.push(logp);
        let ce = g.cross_entropy(logp, labels)?;
        let kl_term = g.scale(kl_s, weights.kl_weight)?;
        let nll_term = g.scale(ce, weights.nll_scale)?;
        kl_acc += g.value(kl_s).item();
        nll_acc += g.value(nll_term).item();
        let term = g.add(kl_term, nll_term)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let s = samples as f64;
    let loss = g.scale(total.expect("samples >= 1"), 1.0 / s)?;
    Ok(ElboTerms {
        loss,
        kl: kl_acc / s,
        nll: nll_acc / s,
        log_probs,
    })
}
