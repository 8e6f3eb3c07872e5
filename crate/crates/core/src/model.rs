//! Deterministic and Bayesian convolutional classifiers sharing one
//! forward pass. The two modes differ only in where the weights come from:
//! plain tensors, or draws from the variational posterior.

use crate::autodiff::kernels::{gemm, im2col, log_softmax_rows, max_pool_planes, pool_len, ConvGeom, MatRef};
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::can::ClassLabel;
use crate::features::{FeatureWindow, FRAME_BITS};
use crate::variational::{self, GaussianParam, PriorSpec, WeightSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape {got:?} does not match model input {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("operation requires {0:?} mode")]
    ModeMismatch(Mode),
    #[error("Bayesian forward needs a weight sample")]
    MissingWeights,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Bayesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    LogSoftmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, window_len, frame_bits]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

impl ModelSpec {
    /// conv 8@3×3/1 pad 1 → relu → maxpool 2 → flatten → dense 64 → relu →
    /// dense 5 → log-softmax.
    pub fn default_for(window_len: usize, mode: Mode) -> Self {
        ModelSpec {
            input: [1, window_len, FRAME_BITS],
            layers: vec![
                Layer::Conv2d {
                    filters: 8,
                    kernel: [3, 3],
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2d { size: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense { units: 64 },
                Layer::Relu,
                Layer::Dense {
                    units: ClassLabel::COUNT,
                },
                Layer::LogSoftmax,
            ],
            mode,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        ModelSpec { mode, ..self.clone() }
    }

    /// Validate the layer chain and return every parameter shape, in
    /// forward order (kernel then bias for each conv / dense layer).
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSpec(msg));
        if self.input.contains(&0) {
            return bad(format!("input {:?} has a zero dimension", self.input));
        }
        let mut shape: Vec<usize> = self.input.to_vec();
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv2d {
                    filters,
                    kernel: [kh, kw],
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return bad(format!("layer {i}: conv needs a C×H×W input, got {shape:?}"));
                    };
                    if filters == 0 || kh == 0 || kw == 0 || stride == 0 {
                        return bad(format!("layer {i}: degenerate conv"));
                    }
                    if kh > h + 2 * padding || kw > w + 2 * padding {
                        return bad(format!("layer {i}: kernel larger than padded input"));
                    }
                    params.push(vec![filters, c, kh, kw]);
                    params.push(vec![filters]);
                    shape = vec![
                        filters,
                        (h + 2 * padding - kh) / stride + 1,
                        (w + 2 * padding - kw) / stride + 1,
                    ];
                }
                Layer::MaxPool2d { size, stride } => {
                    let [c, h, w] = shape[..] else {
                        return bad(format!("layer {i}: pooling needs a C×H×W input, got {shape:?}"));
                    };
                    if size == 0 || stride == 0 || size > h || size > w {
                        return bad(format!("layer {i}: pool window {size} on {h}×{w}"));
                    }
                    shape = vec![c, (h - size) / stride + 1, (w - size) / stride + 1];
                }
                Layer::Relu => {}
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Dense { units } => {
                    let [d] = shape[..] else {
                        return bad(format!("layer {i}: dense needs a flat input, got {shape:?}"));
                    };
                    if units == 0 {
                        return bad(format!("layer {i}: dense with zero units"));
                    }
                    params.push(vec![d, units]);
                    params.push(vec![units]);
                    shape = vec![units];
                }
                Layer::LogSoftmax => {
                    if i + 1 != self.layers.len() {
                        return bad("log-softmax must be the last layer".into());
                    }
                }
            }
        }
        if self.layers.last() != Some(&Layer::LogSoftmax) {
            return bad("last layer must be log-softmax".into());
        }
        if shape != [ClassLabel::COUNT] {
            return bad(format!("output shape {shape:?}, need [{}]", ClassLabel::COUNT));
        }
        Ok(params)
    }

    pub fn param_count(&self) -> Result<usize, ModelError> {
        Ok(self.param_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }

    pub fn describe(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => format!("conv{filters}@{}x{}/s{stride}p{padding}", kernel[0], kernel[1]),
                Layer::Relu => "relu".into(),
                Layer::MaxPool2d { size, stride } => format!("maxpool{size}/s{stride}"),
                Layer::Flatten => "flatten".into(),
                Layer::Dense { units } => format!("dense{units}"),
                Layer::LogSoftmax => "log_softmax".into(),
            })
            .collect();
        format!("{:?} {:?} -> {}", self.mode, self.input, layers.join(" -> "))
    }
}

/// Run the layer stack on `input` (`[N×C×H×W]`) using the given weight
/// nodes (forward order, as in [`ModelSpec::param_shapes`]).
pub fn forward_graph(g: &mut Graph, spec: &ModelSpec, weights: &[Var], input: Var) -> Result<Var, TensorError> {
    let mut x = input;
    let mut w = weights.iter().copied();
    let mut next = || {
        w.next()
            .ok_or_else(|| TensorError::InvalidArgument("too few weight tensors for spec".into()))
    };
    for layer in &spec.layers {
        x = match *layer {
            Layer::Conv2d { stride, padding, .. } => {
                let (k, b) = (next()?, next()?);
                let y = g.conv2d(x, k, stride, padding)?;
                g.add_channel_bias(y, b)?
            }
            Layer::Relu => g.relu(x)?,
            Layer::MaxPool2d { size, stride } => g.max_pool2d(x, size, stride)?,
            Layer::Flatten => g.flatten(x)?,
            Layer::Dense { .. } => {
                let (k, b) = (next()?, next()?);
                let y = g.matmul(x, k)?;
                g.add_bias(y, b)?
            }
            Layer::LogSoftmax => g.log_softmax(x)?,
        };
    }
    Ok(x)
}

/// Tape-free forward pass with the same arithmetic as [`forward_graph`].
/// Layers up to `Flatten` run one image at a time so activations stay in
/// cache; the dense tail runs on the whole batch.
fn infer(spec: &ModelSpec, weights: &[Tensor], batch: &Tensor) -> Result<Tensor, TensorError> {
    let &[n, c0, h0, w0] = batch.shape() else {
        return Err(TensorError::InvalidArgument("batch must be 4-D".into()));
    };
    let split = spec
        .layers
        .iter()
        .position(|l| *l == Layer::Flatten)
        .ok_or_else(|| TensorError::InvalidArgument("spec has no flatten layer".into()))?;
    let (image_layers, tail) = (&spec.layers[..split], &spec.layers[split + 1..]);
    let image_len = c0 * h0 * w0;
    let mut feats: Vec<f64> = Vec::new();
    let mut cols = Vec::new();
    let mut dim = 0;
    for img in batch.data().chunks_exact(image_len) {
        let mut cur = img.to_vec();
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut wi = 0;
        for layer in image_layers {
            match *layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let (k, b) = (&weights[wi], &weights[wi + 1]);
                    wi += 2;
                    let &[f, _, kh, kw] = k.shape() else {
                        return Err(TensorError::InvalidArgument("conv kernel must be 4-D".into()));
                    };
                    let geom = ConvGeom {
                        channels: c,
                        height: h,
                        width: w,
                        kh,
                        kw,
                        stride,
                        pad: padding,
                        out_h: (h + 2 * padding - kh) / stride + 1,
                        out_w: (w + 2 * padding - kw) / stride + 1,
                    };
                    let (p, ol) = (geom.patch_len(), geom.out_len());
                    cols.resize(p * ol, 0.0);
                    im2col(&cur, &geom, &mut cols);
                    let mut out = vec![0.0; f * ol];
                    gemm(MatRef::new(k.data(), f, p), MatRef::new(&cols, p, ol), &mut out, 0.0);
                    for (plane, &bias) in out.chunks_exact_mut(ol).zip(b.data()) {
                        plane.iter_mut().for_each(|a| *a += bias);
                    }
                    (c, h, w) = (f, geom.out_h, geom.out_w);
                    cur = out;
                }
                Layer::Relu => cur.iter_mut().for_each(|x| *x = x.max(0.0)),
                Layer::MaxPool2d { size, stride } => {
                    let mut out = Vec::with_capacity(cur.len() / (size * size).max(1));
                    max_pool_planes(&cur, h, w, size, stride, &mut out, None);
                    (h, w) = (pool_len(h, size, stride), pool_len(w, size, stride));
                    cur = out;
                }
                _ => return Err(TensorError::InvalidArgument(format!("{layer:?} before flatten"))),
            }
        }
        dim = cur.len();
        feats.extend_from_slice(&cur);
    }
    let mut wi = spec.layers[..split]
        .iter()
        .filter(|l| matches!(l, Layer::Conv2d { .. }))
        .count()
        * 2;
    let mut x = feats;
    for layer in tail {
        match *layer {
            Layer::Dense { units } => {
                let (k, b) = (&weights[wi], &weights[wi + 1]);
                wi += 2;
                let mut out = vec![0.0; n * units];
                gemm(
                    MatRef::new(&x, n, dim),
                    MatRef::new(k.data(), dim, units),
                    &mut out,
                    0.0,
                );
                for row in out.chunks_exact_mut(units) {
                    row.iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
                }
                x = out;
                dim = units;
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::LogSoftmax => log_softmax_rows(&mut x, dim),
            _ => return Err(TensorError::InvalidArgument(format!("{layer:?} after flatten"))),
        }
    }
    let out = Tensor::new(vec![n, dim], x)?;
    if !out.all_finite() {
        return Err(TensorError::Numerical { op: "forward" });
    }
    Ok(out)
}

/// Stack windows into an `[N×1×W×B]` input tensor.
pub fn batch_tensor<'a, I>(windows: I) -> Result<Tensor, ModelError>
where
    I: IntoIterator<Item = &'a FeatureWindow>,
{
    let mut data = Vec::new();
    let mut n = 0;
    let mut wlen = None;
    for w in windows {
        if *wlen.get_or_insert(w.window_len()) != w.window_len() {
            return Err(ModelError::ShapeMismatch {
                got: vec![w.window_len(), FRAME_BITS],
                want: vec![wlen.unwrap_or(0), FRAME_BITS],
            });
        }
        data.extend(w.bits().iter().map(|&b| f64::from(b)));
        n += 1;
    }
    let wlen = wlen.ok_or_else(|| ModelError::InvalidSpec("empty batch".into()))?;
    Ok(Tensor::new(vec![n, 1, wlen, FRAME_BITS], data)?)
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Weights (or posterior means) start uniform on `(−r, r)`; biases at 0.
    pub mu_range: f64,
    /// Initial `ρ` for every posterior scale (`σ = softplus(ρ)`).
    pub rho: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mu_range: 0.1,
            rho: -3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "tensors", rename_all = "snake_case")]
pub enum Params {
    Deterministic(Vec<Tensor>),
    Bayesian(Vec<GaussianParam>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Params,
    pub prior: PriorSpec,
    pub epoch: usize,
}

impl ModelState {
    pub fn init(spec: ModelSpec, init: &InitConfig, prior: PriorSpec, seed: u64) -> Result<Self, ModelError> {
        let shapes = spec.param_shapes()?;
        prior.validate().map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let is_bias = |i: usize| i % 2 == 1;
        let params = match spec.mode {
            Mode::Deterministic => Params::Deterministic(
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        if is_bias(i) {
                            Tensor::zeros(s)
                        } else {
                            let n = s.iter().product();
                            let data = (0..n)
                                .map(|_| rng.random_range(-init.mu_range..init.mu_range))
                                .collect();
                            Tensor::new(s.clone(), data).expect("shape product")
                        }
                    })
                    .collect(),
            ),
            Mode::Bayesian => Params::Bayesian(
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let range = if is_bias(i) { 0.0 } else { init.mu_range };
                        GaussianParam::init(s, range, init.rho, &mut rng)
                    })
                    .collect(),
            ),
        };
        Ok(ModelState {
            spec,
            params,
            prior,
            epoch: 0,
        })
    }

    /// Assemble and check shapes against the `ModelSpec`.
    pub fn from_parts(spec: ModelSpec, params: Params, prior: PriorSpec, epoch: usize) -> Result<Self, ModelError> {
        let shapes = spec.param_shapes()?;
        let got: Vec<Vec<usize>> = match &params {
            Params::Deterministic(ts) if spec.mode == Mode::Deterministic => {
                ts.iter().map(|t| t.shape().to_vec()).collect()
            }
            Params::Bayesian(ps) if spec.mode == Mode::Bayesian => ps.iter().map(|p| p.shape().to_vec()).collect(),
            _ => return Err(ModelError::ModeMismatch(spec.mode)),
        };
        if got != shapes {
            return Err(ModelError::InvalidSpec(format!(
                "parameter shapes {got:?}, spec needs {shapes:?}"
            )));
        }
        Ok(ModelState {
            spec,
            params,
            prior,
            epoch,
        })
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    /// Deterministic weights, or posterior means.
    pub fn mean_weights(&self) -> Vec<Tensor> {
        match &self.params {
            Params::Deterministic(ts) => ts.clone(),
            Params::Bayesian(ps) => ps.iter().map(|p| p.mu.clone()).collect(),
        }
    }

    /// One posterior draw per weight tensor.
    pub fn sample_weights<R: Rng>(&self, rng: &mut R) -> Result<Vec<WeightSample>, ModelError> {
        match &self.params {
            Params::Bayesian(ps) => Ok(ps
                .iter()
                .map(|p| variational::sample_weights(p, &self.prior, rng))
                .collect()),
            Params::Deterministic(_) => Err(ModelError::ModeMismatch(Mode::Bayesian)),
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let want = self.spec.input;
        match batch.shape() {
            [_, c, h, w] if [*c, *h, *w] == want => Ok(()),
            got => Err(ModelError::ShapeMismatch {
                got: got.to_vec(),
                want: want.to_vec(),
            }),
        }
    }

    /// `[n×5]` log-probabilities. Deterministic mode uses its own weights;
    /// Bayesian mode requires an explicit weight draw (e.g. from
    /// [`ModelState::sample_weights`]).
    pub fn forward(&self, batch: &Tensor, weights: Option<&[Tensor]>) -> Result<Tensor, ModelError> {
        self.check_input(batch)?;
        let owned;
        let ws: &[Tensor] = match (&self.params, weights) {
            (Params::Deterministic(ts), None) => ts,
            (_, Some(ws)) => ws,
            (Params::Bayesian(_), None) => return Err(ModelError::MissingWeights),
        };
        let expected = self.spec.param_shapes()?;
        if ws.len() != expected.len() || ws.iter().zip(&expected).any(|(t, s)| t.shape() != &s[..]) {
            owned = ws.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
            return Err(ModelError::InvalidSpec(format!(
                "weights {owned:?}, spec needs {expected:?}"
            )));
        }
        Ok(infer(&self.spec, ws, batch)?)
    }

    /// Forward with a fresh posterior draw (Bayesian) or the fixed weights.
    pub fn forward_sampled<R: Rng>(&self, batch: &Tensor, rng: &mut R) -> Result<Tensor, ModelError> {
        match self.mode() {
            Mode::Deterministic => self.forward(batch, None),
            Mode::Bayesian => {
                let ws: Vec<Tensor> = self.sample_weights(rng)?.into_iter().map(|s| s.w).collect();
                self.forward(batch, Some(&ws))
            }
        }
    }
}

/// Arg-max per row; ties go to the lower class index.
pub fn predict_classes(log_probs: &Tensor) -> Vec<ClassLabel> {
    log_probs
        .rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            ClassLabel::from_code(best as u8).unwrap_or(ClassLabel::Normal)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::WindowOrigin;

    fn random_batch(n: usize, wlen: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * wlen * FRAME_BITS)
            .map(|_| f64::from(rng.random_range(0..2u8)))
            .collect();
        Tensor::new(vec![n, 1, wlen, FRAME_BITS], data).unwrap()
    }

    #[test]
    fn default_spec_shapes() {
        let spec = ModelSpec::default_for(16, Mode::Deterministic);
        let shapes = spec.param_shapes().unwrap();
        assert_eq!(
            shapes,
            vec![
                vec![8, 1, 3, 3],
                vec![8],
                vec![8 * 8 * 46, 64],
                vec![64],
                vec![64, 5],
                vec![5]
            ]
        );
        assert_eq!(spec.param_count().unwrap(), 80 + 2944 * 64 + 64 + 325);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut spec = ModelSpec::default_for(16, Mode::Bayesian);
        spec.layers[6] = Layer::Dense { units: 4 };
        assert!(spec.param_shapes().is_err());
        let mut spec = ModelSpec::default_for(16, Mode::Bayesian);
        spec.layers.remove(3);
        assert!(spec.param_shapes().is_err());
        let mut spec = ModelSpec::default_for(16, Mode::Bayesian);
        spec.layers.pop();
        assert!(spec.param_shapes().is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let spec = ModelSpec::default_for(4, Mode::Deterministic);
        let zeros: Vec<Tensor> = spec.param_shapes().unwrap().iter().map(|s| Tensor::zeros(s)).collect();
        let state = ModelState::from_parts(spec, Params::Deterministic(zeros), PriorSpec::default(), 0).unwrap();
        let out = state.forward(&random_batch(3, 4, 1), None).unwrap();
        assert!(out.data().iter().all(|&v| (v - (0.2f64).ln()).abs() < 1e-15));
    }

    #[test]
    fn rows_are_normalized() {
        let spec = ModelSpec::default_for(4, Mode::Deterministic);
        let state = ModelState::init(
            spec,
            &InitConfig {
                mu_range: 0.5,
                rho: -3.0,
            },
            PriorSpec::default(),
            3,
        )
        .unwrap();
        let out = state.forward(&random_batch(6, 4, 2), None).unwrap();
        for row in out.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bayesian_requires_weights_and_input_shape() {
        let spec = ModelSpec::default_for(4, Mode::Bayesian);
        let state = ModelState::init(spec, &InitConfig::default(), PriorSpec::default(), 0).unwrap();
        assert_eq!(
            state.forward(&random_batch(1, 4, 0), None),
            Err(ModelError::MissingWeights)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(state.forward_sampled(&random_batch(2, 4, 0), &mut rng).is_ok());
        assert!(matches!(
            state.forward_sampled(&random_batch(2, 5, 0), &mut rng),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let det = ModelState::init(
            state.spec.with_mode(Mode::Deterministic),
            &InitConfig::default(),
            PriorSpec::default(),
            0,
        )
        .unwrap();
        assert_eq!(
            det.sample_weights(&mut rng).unwrap_err(),
            ModelError::ModeMismatch(Mode::Bayesian)
        );
    }

    #[test]
    fn tape_free_forward_matches_graph() {
        let spec = ModelSpec::default_for(5, Mode::Deterministic);
        let state = ModelState::init(
            spec.clone(),
            &InitConfig {
                mu_range: 0.4,
                rho: -3.0,
            },
            PriorSpec::default(),
            11,
        )
        .unwrap();
        let batch = random_batch(4, 5, 3);
        let fast = state.forward(&batch, None).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = state.mean_weights().into_iter().map(|t| g.input(t)).collect();
        let x = g.input(batch);
        let out = forward_graph(&mut g, &spec, &vars, x).unwrap();
        for (a, b) in fast.data().iter().zip(g.value(out).data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn predict_examples() {
        let t = Tensor::from_rows(&[
            &[-0.1, -5.0, -5.0, -5.0, -5.0],
            &[-3.0, -0.5, -0.5, -4.0, -4.0],
            &[-1.6, -1.6, -1.6, -1.6, -1.6],
        ])
        .unwrap();
        assert_eq!(
            predict_classes(&t),
            vec![ClassLabel::Normal, ClassLabel::DoS, ClassLabel::Normal]
        );
    }

    #[test]
    fn batch_tensor_layout() {
        let bits: Vec<u8> = (0..2 * FRAME_BITS).map(|i| (i % 3 == 0) as u8).collect();
        let w = FeatureWindow::from_bits(bits.clone(), 2, ClassLabel::DoS, WindowOrigin::default()).unwrap();
        let t = batch_tensor([&w, &w]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, FRAME_BITS]);
        assert_eq!(t.data()[FRAME_BITS * 2 + 3], f64::from(bits[3]));
        assert!(batch_tensor(std::iter::empty()).is_err());
    }
}
