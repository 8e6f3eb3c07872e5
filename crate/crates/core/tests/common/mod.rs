//! Shared oracles for the integration suites.
#![allow(dead_code)]

pub mod parsing;

use bayescan::autodiff::{Graph, Tensor, Var};
use bayescan::dataset::uniform_noise_windows;
use bayescan::model::{forward_graph, InitConfig, Layer, Mode, ModelSpec, ModelState, Params};
use bayescan::uncertainty::{mc_predict_batch, triage_decide};
use bayescan::variational::{
    elbo_mc, kl_analytic, sample_weights, sample_weights_with, softplus_inv, ElboWeights, GaussianParam, PriorSpec,
    ReplayNoise, ZeroNoise,
};
use bayescan::{FeatureWindow, PredictiveSummary, TriagePolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so gradients that are zero up to
/// roundoff compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with `|x| >= gap`, random sign.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.01 apart, shuffled.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.05 - n as f64 * 0.025 + rng.random_range(0.0..0.02))
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest relative error between reverse-mode gradients of the scalar
/// `build` and central finite differences, over every input element.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    assert!(g.value(out).is_scalar(), "gradcheck needs a scalar output");
    let grads = g.backward(out).expect("backward");
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            vals[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&vals);
            vals[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Contract a tensor-valued node to a scalar with fixed random weights,
/// so the check covers the full vector-Jacobian product.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let r = uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0xA5A5));
    let r = g.input(r);
    let m = g.mul(v, r).unwrap();
    g.sum(m).unwrap()
}

pub struct OpCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

const INSTANCES: usize = 12;

fn run<G, F>(name: &'static str, mut gen: G, build: F) -> OpCase
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Var + Copy,
{
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let mut r = rng(0x6C0DE ^ (k as u64) << 8 ^ name.len() as u64);
        let inputs = gen(&mut r);
        worst = worst.max(gradcheck(&inputs, build));
    }
    OpCase {
        name,
        instances: INSTANCES,
        worst,
    }
}

fn dims(r: &mut ChaCha8Rng) -> [usize; 2] {
    [r.random_range(1..4), r.random_range(1..5)]
}

/// Finite-difference checks of every differentiable op and the full
/// classifier composite.
pub fn gradcheck_suite() -> Vec<OpCase> {
    let mut out = Vec::new();
    let pair = |r: &mut ChaCha8Rng| {
        let d = dims(r);
        vec![uniform(&d, -1.0, 1.0, r), uniform(&d, -1.0, 1.0, r)]
    };
    let one = |r: &mut ChaCha8Rng| vec![uniform(&dims(r), -2.0, 2.0, r)];
    let positive = |r: &mut ChaCha8Rng| vec![uniform(&dims(r), 0.2, 2.0, r)];
    out.push(run("add", pair, |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 1)
    }));
    out.push(run("sub", pair, |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y, 2)
    }));
    out.push(run("mul", pair, |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 3)
    }));
    out.push(run(
        "div",
        |r| {
            let d = dims(r);
            vec![uniform(&d, -1.0, 1.0, r), uniform(&d, 0.3, 2.0, r)]
        },
        |g, v| {
            let y = g.div(v[0], v[1]).unwrap();
            project(g, y, 4)
        },
    ));
    out.push(run("scale", one, |g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        project(g, y, 5)
    }));
    out.push(run("add_scalar", one, |g, v| {
        let y = g.add_scalar(v[0], 0.3).unwrap();
        project(g, y, 6)
    }));
    out.push(run("square", one, |g, v| {
        let y = g.square(v[0]).unwrap();
        project(g, y, 7)
    }));
    out.push(run("log", positive, |g, v| {
        let y = g.log(v[0]).unwrap();
        project(g, y, 8)
    }));
    out.push(run("softplus", one, |g, v| {
        let y = g.softplus(v[0]).unwrap();
        project(g, y, 9)
    }));
    out.push(run("sum", one, |g, v| {
        let y = g.square(v[0]).unwrap();
        g.sum(y).unwrap()
    }));
    out.push(run("mean", one, |g, v| {
        let y = g.square(v[0]).unwrap();
        g.mean(y).unwrap()
    }));
    out.push(run(
        "matmul",
        |r| {
            let (n, k, m) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
            vec![uniform(&[n, k], -1.0, 1.0, r), uniform(&[k, m], -1.0, 1.0, r)]
        },
        |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 10)
        },
    ));
    out.push(run(
        "add_bias",
        |r| {
            let d = dims(r);
            vec![uniform(&d, -1.0, 1.0, r), uniform(&[d[1]], -1.0, 1.0, r)]
        },
        |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            project(g, y, 11)
        },
    ));
    out.push(run(
        "add_channel_bias",
        |r| {
            let (n, f) = (r.random_range(1..3), r.random_range(1..4));
            vec![uniform(&[n, f, 2, 3], -1.0, 1.0, r), uniform(&[f], -1.0, 1.0, r)]
        },
        |g, v| {
            let y = g.add_channel_bias(v[0], v[1]).unwrap();
            project(g, y, 12)
        },
    ));
    out.push(run(
        "conv2d",
        |r| {
            let c = r.random_range(1..3);
            vec![uniform(&[c, 5, 6], -1.0, 1.0, r), uniform(&[2, c, 3, 3], -1.0, 1.0, r)]
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1).unwrap();
            project(g, y, 13)
        },
    ));
    out.push(run(
        "conv2d_batched_strided",
        |r| {
            let n = r.random_range(1..3);
            vec![
                uniform(&[n, 2, 6, 7], -1.0, 1.0, r),
                uniform(&[3, 2, 2, 3], -1.0, 1.0, r),
            ]
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 0).unwrap();
            project(g, y, 14)
        },
    ));
    out.push(run(
        "relu",
        |r| vec![away_from_zero(&dims(r), 0.01, r)],
        |g, v| {
            let y = g.relu(v[0]).unwrap();
            project(g, y, 15)
        },
    ));
    out.push(run(
        "max_pool2d",
        |r| {
            let n = r.random_range(1..3);
            vec![distinct(&[n, 2, 4, 6], r)]
        },
        |g, v| {
            let y = g.max_pool2d(v[0], 2, 2).unwrap();
            project(g, y, 16)
        },
    ));
    out.push(run(
        "max_pool2d_overlapping",
        |r| vec![distinct(&[1, 1, 5, 5], r)],
        |g, v| {
            let y = g.max_pool2d(v[0], 3, 1).unwrap();
            project(g, y, 17)
        },
    ));
    out.push(run(
        "reshape_flatten",
        |r| vec![uniform(&[2, 3, 2], -1.0, 1.0, r)],
        |g, v| {
            let a = g.reshape(v[0], vec![3, 4]).unwrap();
            let b = g.reshape(a, vec![2, 2, 3]).unwrap();
            let f = g.flatten(b).unwrap();
            project(g, f, 18)
        },
    ));
    out.push(run("softmax", one, |g, v| {
        let y = g.softmax(v[0]).unwrap();
        project(g, y, 19)
    }));
    out.push(run("log_softmax", one, |g, v| {
        let y = g.log_softmax(v[0]).unwrap();
        project(g, y, 20)
    }));
    out.push(run(
        "cross_entropy",
        |r| vec![uniform(&[4, 5], -2.0, 2.0, r)],
        |g, v| {
            let lp = g.log_softmax(v[0]).unwrap();
            g.cross_entropy(lp, &[0, 3, 4, 1]).unwrap()
        },
    ));
    out.push(run(
        "gaussian_sample",
        |r| {
            let d = dims(r);
            vec![uniform(&d, -1.0, 1.0, r), uniform(&d, 0.1, 1.0, r)]
        },
        |g, v| {
            let shape = g.shape(v[0]).to_vec();
            let eps = uniform(&shape, -2.0, 2.0, &mut rng(77));
            let y = g.gaussian_sample(v[0], v[1], eps).unwrap();
            project(g, y, 21)
        },
    ));
    out.push(run("normal_log_density", one, |g, v| {
        g.normal_log_density(v[0], 0.7).unwrap()
    }));
    out.push(run("composite", composite_inputs, composite));
    out.push(run("elbo_frozen_noise", elbo_inputs, elbo));
    out
}

fn elbo_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        uniform(&[3, 4], -0.5, 0.5, r),
        uniform(&[3, 4], -2.0, 0.5, r),
        uniform(&[4], -0.2, 0.2, r),
        uniform(&[4], -2.0, 0.5, r),
    ]
}

/// Two-sample variational loss of a dense softmax layer with replayed
/// noise; inputs are `(μ_W, ρ_W, μ_b, ρ_b)`.
fn elbo(g: &mut Graph, v: &[Var]) -> Var {
    let mut r = rng(91);
    let noise = (0..4)
        .map(|i| uniform(if i % 2 == 0 { &[3, 4] } else { &[4] }, -2.0, 2.0, &mut r))
        .collect();
    let mut noise = ReplayNoise::new(noise);
    let x = g.input(uniform(&[2, 3], -1.0, 1.0, &mut r));
    let weights = ElboWeights {
        kl_weight: 0.25,
        nll_scale: 3.0,
    };
    let prior = PriorSpec::IsotropicGaussian { sigma: 0.8 };
    let theta = [(v[0], v[1]), (v[2], v[3])];
    elbo_mc(g, &theta, &prior, &mut noise, 2, weights, &[1, 3], |g, w| {
        let h = g.matmul(x, w[0])?;
        let h = g.add_bias(h, w[1])?;
        g.log_softmax(h)
    })
    .unwrap()
    .loss
}

fn composite_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        uniform(&[2, 1, 6, 8], 0.0, 1.0, r),
        uniform(&[3, 1, 3, 3], -0.5, 0.5, r),
        uniform(&[3], -0.1, 0.1, r),
        uniform(&[36, 4], -0.5, 0.5, r),
        uniform(&[4], -0.1, 0.1, r),
        uniform(&[4, 5], -0.5, 0.5, r),
        uniform(&[5], -0.1, 0.1, r),
    ]
}

/// conv → bias → relu → pool → flatten → dense → relu → dense →
/// log-softmax → cross-entropy.
fn composite(g: &mut Graph, v: &[Var]) -> Var {
    let c = g.conv2d(v[0], v[1], 1, 1).unwrap();
    let c = g.add_channel_bias(c, v[2]).unwrap();
    let c = g.relu(c).unwrap();
    let p = g.max_pool2d(c, 2, 2).unwrap();
    let f = g.flatten(p).unwrap();
    let h = g.matmul(f, v[3]).unwrap();
    let h = g.add_bias(h, v[4]).unwrap();
    let h = g.relu(h).unwrap();
    let o = g.matmul(h, v[5]).unwrap();
    let o = g.add_bias(o, v[6]).unwrap();
    let lp = g.log_softmax(o).unwrap();
    g.cross_entropy(lp, &[2, 4]).unwrap()
}

pub struct KlCase {
    pub label: String,
    pub analytic: f64,
    pub mc: f64,
}

impl KlCase {
    /// Within 1% relative, or `|mc| <= 1e-9` when the closed form is 0.
    pub fn passes(&self) -> bool {
        if self.analytic.abs() < 1e-12 {
            self.mc.abs() <= 1e-9
        } else {
            ((self.mc - self.analytic) / self.analytic).abs() <= 0.01
        }
    }
}

pub const KL_DRAWS: usize = 100_000;

/// Monte-Carlo mean of `log q(w) − log P(w)` over `draws` reparameterized
/// samples, using the log densities of each draw.
pub fn kl_monte_carlo(theta: &GaussianParam, prior: &PriorSpec, draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let s = sample_weights(theta, prior, &mut r);
        acc += s.log_q - s.log_prior;
    }
    acc / draws as f64
}

/// The two closed-form anchors plus five random `(θ, σ_p)` settings.
pub fn kl_oracle_cases() -> Vec<KlCase> {
    let unit = softplus_inv(1.0);
    let scalar = |mu: f64, rho: f64| {
        GaussianParam::new(
            Tensor::new(vec![1], vec![mu]).unwrap(),
            Tensor::new(vec![1], vec![rho]).unwrap(),
        )
        .unwrap()
    };
    let mut settings = vec![
        ("anchor mu=0 sigma=1 sigma_p=1".to_string(), scalar(0.0, unit), 1.0, 0.0),
        ("anchor mu=1 sigma=1 sigma_p=1".to_string(), scalar(1.0, unit), 1.0, 0.5),
    ];
    let mut r = rng(0x4B4C);
    for k in 0..5 {
        let n = 8;
        let theta = GaussianParam::new(uniform(&[n], -1.0, 1.0, &mut r), uniform(&[n], -2.0, 1.0, &mut r)).unwrap();
        let sp = r.random_range(0.3..2.0);
        // Independent closed form: Σ ln(σ_p/σ) + (σ² + μ²)/(2σ_p²) − ½.
        let expect = theta
            .mu
            .data()
            .iter()
            .zip(theta.rho.data())
            .map(|(&m, &rho)| {
                let s = (1.0 + rho.exp()).ln();
                (sp / s).ln() + (s * s + m * m) / (2.0 * sp * sp) - 0.5
            })
            .sum();
        settings.push((
            format!("random setting {k} (n={n}, sigma_p={sp:.3})"),
            theta,
            sp,
            expect,
        ));
    }
    settings
        .into_iter()
        .enumerate()
        .map(|(i, (label, theta, sp, expect))| {
            let prior = PriorSpec::IsotropicGaussian { sigma: sp };
            let analytic = kl_analytic(&theta, &prior);
            assert!(
                (analytic - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "{label}: {analytic} vs {expect}"
            );
            KlCase {
                label,
                analytic,
                mc: kl_monte_carlo(&theta, &prior, KL_DRAWS, 1000 + i as u64),
            }
        })
        .collect()
}

/// A random small valid network spec and a binary input batch for it.
pub fn random_network(r: &mut ChaCha8Rng, mode: Mode) -> (ModelSpec, Tensor) {
    loop {
        let h = r.random_range(2..7);
        let w = r.random_range(3..12);
        let mut layers = vec![
            Layer::Conv2d {
                filters: r.random_range(1..4),
                kernel: [r.random_range(1..4), r.random_range(1..4)],
                stride: r.random_range(1..3),
                padding: r.random_range(0..2),
            },
            Layer::Relu,
        ];
        if r.random_bool(0.6) {
            layers.push(Layer::MaxPool2d {
                size: r.random_range(1..3),
                stride: r.random_range(1..3),
            });
        }
        layers.push(Layer::Flatten);
        if r.random_bool(0.7) {
            layers.push(Layer::Dense {
                units: r.random_range(1..7),
            });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { units: 5 });
        layers.push(Layer::LogSoftmax);
        let spec = ModelSpec {
            input: [1, h, w],
            layers,
            mode,
        };
        if spec.param_shapes().is_err() {
            continue;
        }
        let n = r.random_range(1..5);
        let bits = (0..n * h * w).map(|_| r.random_range(0..2) as f64).collect();
        return (spec, Tensor::new(vec![n, 1, h, w], bits).unwrap());
    }
}

pub struct ReductionReport {
    pub configs: usize,
    pub exact: usize,
}

/// Bayesian forward passes with `ε ≡ 0` against the deterministic network
/// whose weights are the posterior means, through both the training graph
/// and the inference path.
pub fn reduction_identity(configs: usize) -> ReductionReport {
    let mut exact = 0;
    for k in 0..configs {
        let mut r = rng(0x5EED_0000 + k as u64);
        let (spec, batch) = random_network(&mut r, Mode::Bayesian);
        let init = InitConfig {
            mu_range: r.random_range(0.05..1.0),
            rho: r.random_range(-4.0..1.0),
        };
        let prior = PriorSpec::IsotropicGaussian {
            sigma: r.random_range(0.2..2.0),
        };
        let bayes = ModelState::init(spec.clone(), &init, prior, r.random()).unwrap();
        let Params::Bayesian(theta) = &bayes.params else {
            unreachable!()
        };
        let det = ModelState::from_parts(
            spec.with_mode(Mode::Deterministic),
            Params::Deterministic(bayes.mean_weights()),
            prior,
            0,
        )
        .unwrap();
        let labels: Vec<usize> = (0..batch.shape()[0]).map(|_| r.random_range(0..5)).collect();

        // Inference path.
        let zero: Vec<Tensor> = theta
            .iter()
            .map(|p| sample_weights_with(p, &prior, Tensor::zeros(p.shape())).unwrap().w)
            .collect();
        let a = bayes.forward(&batch, Some(&zero)).unwrap();
        let b = det.forward(&batch, None).unwrap();

        // Training graph: variational loss with the prior term weighted 0.
        let mut g = Graph::new();
        let vars: Vec<(Var, Var)> = theta
            .iter()
            .map(|p| (g.param(p.mu.clone()), g.param(p.rho.clone())))
            .collect();
        let x = g.input(batch.clone());
        let weights = ElboWeights {
            kl_weight: 0.0,
            nll_scale: 1.0,
        };
        let terms = elbo_mc(&mut g, &vars, &prior, &mut ZeroNoise, 1, weights, &labels, |g, ws| {
            forward_graph(g, &spec, ws, x)
        })
        .unwrap();
        let mut h = Graph::new();
        let dvars: Vec<Var> = det.mean_weights().into_iter().map(|t| h.param(t)).collect();
        let dx = h.input(batch.clone());
        let dl = forward_graph(&mut h, &det.spec, &dvars, dx).unwrap();
        let dce = h.cross_entropy(dl, &labels).unwrap();

        let same = a == b
            && g.value(terms.log_probs[0]) == h.value(dl)
            && g.value(terms.loss).item().to_bits() == h.value(dce).item().to_bits();
        exact += same as usize;
    }
    ReductionReport { configs, exact }
}

pub struct RoutingReport {
    pub batches: usize,
    pub items: usize,
    pub agree: usize,
}

fn random_simplex(r: &mut ChaCha8Rng, sharpness: f64) -> [f64; 5] {
    let mut p = [0.0; 5];
    for x in p.iter_mut() {
        *x = r.random_range(0.0f64..1.0).powf(sharpness);
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// The policy predicate written out on its own.
pub fn predicate(mean: &[f64; 5], entropy: f64, tau: f64, eta: f64) -> bool {
    let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max < tau || entropy > eta
}

/// Route `batches` prediction batches (model outputs and synthetic
/// probability rows, random policies) and count items whose flag matches
/// the predicate.
pub fn triage_routing(batches: usize) -> RoutingReport {
    let window_len = 4;
    let state = ModelState::init(
        ModelSpec::default_for(window_len, Mode::Bayesian),
        &InitConfig {
            mu_range: 0.3,
            rho: -1.0,
        },
        PriorSpec::default(),
        5,
    )
    .unwrap();
    let (mut items, mut agree) = (0, 0);
    for b in 0..batches {
        let mut r = rng(0x7217 + b as u64);
        let policy = if b == 0 {
            TriagePolicy::default()
        } else {
            TriagePolicy::new(r.random_range(0.2..=1.0), r.random_range(0.0..1.6)).unwrap()
        };
        let summaries: Vec<PredictiveSummary> = if b % 2 == 0 {
            let windows = uniform_noise_windows(20, window_len, r.random());
            let refs: Vec<&FeatureWindow> = windows.iter().collect();
            mc_predict_batch(&state, &refs, r.random_range(2..8), r.random()).unwrap()
        } else {
            (0..40)
                .map(|_| {
                    let sharp = r.random_range(0.5..12.0);
                    let s = r.random_range(2..6);
                    PredictiveSummary::from_samples((0..s).map(|_| random_simplex(&mut r, sharp)).collect()).unwrap()
                })
                .collect()
        };
        for s in &summaries {
            let decision = triage_decide(s, &policy);
            let expect = predicate(&s.mean, s.entropy, policy.max_prob_threshold, policy.entropy_threshold);
            items += 1;
            agree += (decision.is_flagged() == expect && policy.flags(s) == expect) as usize;
        }
    }
    RoutingReport { batches, items, agree }
}
