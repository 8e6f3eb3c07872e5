//! Dense tensors and a tape-based reverse-mode automatic differentiation
//! engine.
//!
//! A [`Graph`] is rebuilt for every step: leaves are added with
//! [`Graph::param`] (differentiable) or [`Graph::input`] (constant), every
//! operation appends a node holding its forward value, and
//! [`Graph::backward`] walks the tape from the root back to the leaves,
//! visiting each node once. Nodes are appended after their parents, so
//! reverse insertion order is a reverse topological order.
//!
//! Convolution is cross-correlation (no kernel flip). Every forward value is
//! checked for NaN/Inf and a non-finite result is reported as
//! [`TensorError::Numerical`].

pub(crate) mod kernels;
mod tensor;

pub use tensor::{Tensor, TensorError};

use kernels::{col2im, gemm, im2col, log_softmax_rows, max_pool_planes, pool_len, ConvGeom, MatRef};
use tensor::mismatch;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logp: Var,
        labels: Vec<usize>,
    },
    GaussianSample {
        mu: Var,
        sigma: Var,
        eps: Tensor,
    },
    NormalLogDensity {
        w: Var,
        sigma: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GaussianSample { .. } => "gaussian_sample",
            Op::NormalLogDensity { .. } => "normal_log_density",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Computation graph (tape).
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the root with respect to leaf `v`; zero when `v` does not
    /// influence the root. Intermediate gradients are not retained.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert!(self.leaf[v.0], "gradients are kept for leaf nodes only");
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Move the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        assert!(self.leaf[v.0], "gradients are kept for leaf nodes only");
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [c] => Some((1, *c)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `(batch, C, H, W)` of a 3-D or 4-D image tensor.
fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [c, h, w] => Some((1, *c, *h, *w)),
        [n, c, h, w] => Some((*n, *c, *h, *w)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::Numerical { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::AddChannelBias(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Conv2d { x, k, .. } => self.requires_grad(*x) || self.requires_grad(*k),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => self.requires_grad(*a),
            Op::MaxPool2d { x, .. } => self.requires_grad(*x),
            Op::CrossEntropy { logp, .. } => self.requires_grad(*logp),
            Op::GaussianSample { mu, sigma, .. } => self.requires_grad(*mu) || self.requires_grad(*sigma),
            Op::NormalLogDensity { w, .. } => self.requires_grad(*w),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Natural log; non-positive inputs are a numerical error.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Numerical { op: "log" });
        }
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(softplus_scalar);
        self.push(Op::Softplus(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            s => return Err(mismatch("matmul", format!("lhs must be 2-D, got {s:?}"))),
        };
        let n = match self.shape(b) {
            [k2, n] if *k2 == k => *n,
            s => return Err(mismatch("matmul", format!("[{m}, {k}] x {s:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let v = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), v)
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, d) = rows_cols(self.shape(x)).ok_or_else(|| mismatch("add_bias", "x must be 1-D or 2-D"))?;
        if self.value(b).len() != d {
            return Err(mismatch("add_bias", format!("bias {:?} for width {d}", self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&bias).for_each(|(a, b)| *a += b);
        }
        self.push(Op::AddBias(x, b), v)
    }

    /// `x[N×F×H×W] + b[F]` broadcast over batch and spatial dims.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, f, h, w) =
            image_dims(self.shape(x)).ok_or_else(|| mismatch("add_channel_bias", "x must be 3-D or 4-D"))?;
        if self.value(b).len() != f {
            return Err(mismatch(
                "add_channel_bias",
                format!("bias {:?} for {f} channels", self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            let c = bias[i % f];
            plane.iter_mut().for_each(|a| *a += c);
        }
        self.push(Op::AddChannelBias(x, b), v)
    }

    /// Cross-correlation of `x[C×H×W]` (or a batch `[N×C×H×W]`) with
    /// `k[F×C×kh×kw]`; output `[F×H'×W']` (or `[N×F×H'×W']`) with
    /// `H' = ⌊(H+2p−kh)/stride⌋+1`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) =
            image_dims(&xs).ok_or_else(|| mismatch("conv2d", format!("input must be 3-D or 4-D, got {xs:?}")))?;
        let (f, kh, kw) = match self.shape(k) {
            [f, kc, kh, kw] if *kc == c => (*f, *kh, *kw),
            s => return Err(mismatch("conv2d", format!("kernel {s:?} for {c} input channels"))),
        };
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded {h}x{w}"),
            ));
        }
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
        let mut out = vec![0.0; batch * f * ol];
        let mut cols = vec![0.0; p * ol];
        {
            let xv = self.value(x).data();
            let kv = self.value(k).data();
            for n in 0..batch {
                im2col(&xv[n * geom.image_len()..][..geom.image_len()], &geom, &mut cols);
                gemm(
                    MatRef::new(kv, f, p),
                    MatRef::new(&cols, p, ol),
                    &mut out[n * f * ol..(n + 1) * f * ol],
                    0.0,
                );
            }
        }
        let shape = if xs.len() == 3 {
            vec![f, geom.out_h, geom.out_w]
        } else {
            vec![batch, f, geom.out_h, geom.out_w]
        };
        let v = Tensor::new(shape, out)?;
        self.push(Op::Conv2d { x, k, geom, batch }, v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// Max pooling over `size × size` windows at the given stride; the
    /// first maximum wins ties.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) =
            image_dims(&xs).ok_or_else(|| mismatch("max_pool2d", format!("input must be 3-D or 4-D, got {xs:?}")))?;
        if size == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument(
                "max_pool2d size and stride must be >= 1".into(),
            ));
        }
        if size > h || size > w {
            return Err(mismatch("max_pool2d", format!("window {size} larger than {h}x{w}")));
        }
        let (oh, ow) = (pool_len(h, size, stride), pool_len(w, size, stride));
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        max_pool_planes(self.value(x).data(), h, w, size, stride, &mut out, Some(&mut argmax));
        let shape = if xs.len() == 3 {
            vec![c, oh, ow]
        } else {
            vec![batch, c, oh, ow]
        };
        let v = Tensor::new(shape, out)?;
        self.push(Op::MaxPool2d { x, argmax }, v)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), v)
    }

    /// Collapse everything after the first dimension: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(a, vec![n, rest])
    }

    /// Row-wise softmax of a `[n×C]` (or `[C]`) tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a)).ok_or_else(|| mismatch("softmax", "input must be 1-D or 2-D"))?;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - max).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(Op::Softmax(a), v)
    }

    /// Row-wise log-softmax of a `[n×C]` (or `[C]`) tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a)).ok_or_else(|| mismatch("log_softmax", "input must be 1-D or 2-D"))?;
        let mut v = self.value(a).clone();
        log_softmax_rows(v.data_mut(), cols);
        self.push(Op::LogSoftmax(a), v)
    }

    /// Mean negative log-likelihood `-(1/n) Σ logp[i, labels[i]]`.
    pub fn cross_entropy(&mut self, logp: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = rows_cols(self.shape(logp)).ok_or_else(|| mismatch("cross_entropy", "log-probs must be 2-D"))?;
        if labels.len() != n {
            return Err(mismatch(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let lp = self.value(logp).data();
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| lp[i * c + l]).sum();
        let v = Tensor::scalar(-total / n as f64);
        self.push(
            Op::CrossEntropy {
                logp,
                labels: labels.to_vec(),
            },
            v,
        )
    }

    /// Reparameterized Gaussian draw `w = μ + σ⊙ε` for a fixed noise
    /// tensor `ε`.
    pub fn gaussian_sample(&mut self, mu: Var, sigma: Var, eps: Tensor) -> Result<Var, TensorError> {
        self.same_shape("gaussian_sample", mu, sigma)?;
        if eps.shape() != self.shape(mu) {
            return Err(mismatch(
                "gaussian_sample",
                format!("noise {:?} for {:?}", eps.shape(), self.shape(mu)),
            ));
        }
        let mut w = self.value(mu).clone();
        for ((x, &s), &e) in w.data_mut().iter_mut().zip(self.value(sigma).data()).zip(eps.data()) {
            *x += s * e;
        }
        self.push(Op::GaussianSample { mu, sigma, eps }, w)
    }

    /// `Σ log N(w; 0, σ²)`.
    pub fn normal_log_density(&mut self, w: Var, sigma: f64) -> Result<Var, TensorError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TensorError::InvalidArgument(format!("sigma {sigma} must be positive")));
        }
        let n = self.value(w).len() as f64;
        let ss: f64 = self.value(w).data().iter().map(|x| x * x).sum();
        let v = -n * (HALF_LN_2PI + sigma.ln()) - ss / (2.0 * sigma * sigma);
        self.push(Op::NormalLogDensity { w, sigma }, Tensor::scalar(v))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || grads[i].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                visited += 1;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(node, g, &mut grads);
        }
        let mut leaf = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaf[i] = true;
                if grads[i].as_ref().is_some_and(|t| !t.all_finite()) {
                    return Err(TensorError::Numerical { op: "backward" });
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            leaf,
            visited,
        })
    }

    fn propagate(&self, node: &Node, mut g: Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone());
                }
                send(*b, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    send(*b, g.map(|x| -x));
                }
                send(*a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    send(*a, g.zip_map(bv, |x, y| x / y));
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(bv, |q, y| -q / y);
                    send(*b, g.zip_map(&q, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                g.data_mut().iter_mut().for_each(|x| *x *= c);
                send(*a, g)
            }
            Op::AddScalar(a) => send(*a, g),
            Op::Square(a) => send(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Softplus(a) => send(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::full(val(*a).shape(), g.item() / n))
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::new(bv.data(), k, n).t(),
                        &mut da,
                        0.0,
                    );
                    send(*a, Tensor::new(vec![m, k], da).expect("gradient shape"));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        MatRef::new(av.data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        &mut db,
                        0.0,
                    );
                    send(*b, Tensor::new(vec![k, n], db).expect("gradient shape"));
                }
            }
            Op::AddBias(x, b) => {
                if wants(*b) {
                    let d = val(*b).len();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("bias shape"));
                }
                send(*x, g);
            }
            Op::AddChannelBias(x, b) => {
                if wants(*b) {
                    let f = val(*b).len();
                    let (_, _, h, w) = image_dims(val(*x).shape()).expect("checked in forward");
                    let mut db = vec![0.0; f];
                    for (i, plane) in g.data().chunks(h * w).enumerate() {
                        db[i % f] += plane.iter().sum::<f64>();
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("bias shape"));
                }
                send(*x, g);
            }
            Op::Conv2d { x, k, geom, batch } => {
                let (xv, kv) = (val(*x).data(), val(*k).data());
                let f = val(*k).shape()[0];
                let (p, ol, il) = (geom.patch_len(), geom.out_len(), geom.image_len());
                let mut cols = vec![0.0; p * ol];
                let mut dk = vec![0.0; f * p];
                let mut dx = if wants(*x) { vec![0.0; batch * il] } else { Vec::new() };
                for n in 0..*batch {
                    let gout = &g.data()[n * f * ol..(n + 1) * f * ol];
                    if wants(*k) {
                        im2col(&xv[n * il..(n + 1) * il], geom, &mut cols);
                        gemm(MatRef::new(gout, f, ol), MatRef::new(&cols, p, ol).t(), &mut dk, 1.0);
                    }
                    if wants(*x) {
                        gemm(MatRef::new(kv, f, p).t(), MatRef::new(gout, f, ol), &mut cols, 0.0);
                        col2im(&cols, geom, &mut dx[n * il..(n + 1) * il]);
                    }
                }
                if wants(*k) {
                    send(*k, Tensor::new(val(*k).shape().to_vec(), dk).expect("gradient shape"));
                }
                if wants(*x) {
                    send(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("gradient shape"));
                }
            }
            Op::Relu(a) => {
                for (d, &y) in g.data_mut().iter_mut().zip(val(*a).data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                send(*a, g)
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx] += gv;
                }
                send(*x, dx);
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec()).expect("same size")),
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().expect("non-empty");
                let mut dx = g;
                for (drow, srow) in dx.data_mut().chunks_mut(cols).zip(node.value.data().chunks(cols)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(d, s)| d * s).sum();
                    drow.iter_mut().zip(srow).for_each(|(d, s)| *d = s * (*d - dot));
                }
                send(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let cols = *node.value.shape().last().expect("non-empty");
                let mut dx = g;
                for (drow, lrow) in dx.data_mut().chunks_mut(cols).zip(node.value.data().chunks(cols)) {
                    let total: f64 = drow.iter().sum();
                    drow.iter_mut().zip(lrow).for_each(|(d, l)| *d -= l.exp() * total);
                }
                send(*a, dx);
            }
            Op::GaussianSample { mu, sigma, eps } => {
                if wants(*sigma) {
                    send(*sigma, g.zip_map(eps, |x, e| x * e));
                }
                send(*mu, g);
            }
            Op::NormalLogDensity { w, sigma } => {
                let c = -g.item() / (sigma * sigma);
                send(*w, val(*w).map(|x| c * x));
            }
            Op::CrossEntropy { logp, labels } => {
                let shape = val(*logp).shape().to_vec();
                let c = *shape.last().expect("non-empty");
                let n = labels.len() as f64;
                let mut d = Tensor::zeros(&shape);
                let scale = -g.item() / n;
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * c + l] = scale;
                }
                send(*logp, d);
            }
        }
    }
}
