//! Wengert-list reverse-mode autodiff.
//!
//! Forward ops append nodes to a [`Tape`]; [`Tape::backward`] walks the list
//! in reverse and [`Tape::accumulate_into`] adds leaf gradients into the
//! owning [`Parameter`]s. Frozen parameters enter the tape as constants and
//! never receive gradient writes.

use crate::error::{NumericsError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::Parameter;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng as _;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
/// Added inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;
/// Row-sum tolerance accepted by [`Tape::cross_entropy`].
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool2d { x: Var, k: usize },
    GlobalAvgPool(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat(Vec<Var>),
    Reshape(Var),
    ChannelScale { x: Var, s: Var },
    Softmax { x: Var, tau: f64 },
    CrossEntropy { pred: Var, target: Var },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Batch statistics from a train-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel).
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    visit_order: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.visit_order.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Node indices in the order the last backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push_node(t, Op::Leaf, rg, None)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push_node(t, Op::Leaf, false, None)
    }

    /// Binds `params[key]`. Frozen parameters become constants.
    pub fn param(&mut self, key: usize, p: &Parameter) -> Var {
        if p.frozen {
            self.constant(p.value.clone())
        } else {
            self.push_node(p.value.clone(), Op::Leaf, true, Some(key))
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, rg, None))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- forward ops -------------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::dim("matmul", format!("lhs {sa:?} axis 1 vs rhs {sb:?} axis 0")));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, sa[0], sa[1], sb[1]);
        let t = Tensor::new(vec![sa[0], sb[1]], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `b[C]` along axis 1 of `x[B, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(NumericsError::dim("bias_add", format!("input axis 1 of {sx:?} vs bias {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / inner) % sx[1]];
        }
        let t = Tensor::new(sx, out)?;
        self.push("bias_add", t, Op::BiasAdd(x, b), &[x, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(name, t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// NCHW convolution with weights `[out, in, kh, kw]`; bias is a separate [`Tape::bias_add`].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(NumericsError::dim("conv2d", format!("input {sx:?} and weight {sw:?} must both be rank 4")));
        }
        if sx[1] != sw[1] {
            return Err(NumericsError::dim("conv2d", format!("input channels (axis 1) {} vs weight axis 1 {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(NumericsError::pre("conv2d", "stride must be >= 1"));
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NumericsError::dim("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (axes 2,3)")));
        }
        let geom = ConvGeom {
            in_ch: sx[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (batch, out_ch) = (sx[0], sw[0]);
        let (q, p) = (geom.cols(), geom.positions());
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![0.0; batch * out_ch * p];
        let mut col = vec![0.0; q * p];
        let in_sz = sx[1] * h * wd;
        for b in 0..batch {
            im2col(&xin[b * in_sz..(b + 1) * in_sz], &geom, &mut col);
            kernels::gemm(wt, &col, &mut out[b * out_ch * p..(b + 1) * out_ch * p], out_ch, q, p);
        }
        let t = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(NumericsError::dim("avg_pool2d", format!("spatial axes 2,3 of {s:?} not divisible by {k}")));
        }
        let (ho, wo) = (s[2] / k, s[3] / k);
        let xin = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        let norm = 1.0 / (k * k) as f64;
        for bc in 0..s[0] * s[1] {
            let src = &xin[bc * s[2] * s[3]..];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += src[(i * k + di) * s[3] + j * k + dj];
                        }
                    }
                    out[(bc * ho + i) * wo + j] = acc * norm;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.push("avg_pool2d", t, Op::AvgPool2d { x, k }, &[x])
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(NumericsError::dim("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let out = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool(x), &[x])
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 && s.len() != 4 {
            return Err(NumericsError::dim("batchnorm", format!("expected rank 2 or 4, got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumericsError::dim(
                "batchnorm",
                format!("axis 1 of input {s:?} vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// Train-mode batchnorm using batch statistics over every axis but 1.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (b, c, inner) = self.check_bn(x, gamma, beta)?;
        let n = (b * inner) as f64;
        let xin = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                mean[ci] += xin[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                var[ci] += xin[base..base + inner].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xin.len()];
        let mut out = vec![0.0; xin.len()];
        for (i, (&v, (xh, o))) in xin.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / inner) % c;
            *xh = (v - mean[ci]) * inv_std[ci];
            *o = g[ci] * *xh + be[ci];
        }
        let unbiased = if n > 1.0 { var.iter().map(|v| v / (n - 1.0)).collect() } else { biased };
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push("batchnorm", t, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])?;
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batchnorm with supplied running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Result<Var> {
        let (_, c, inner) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(NumericsError::dim("batchnorm", format!("running stats length vs {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / inner) % c;
                g[ci] * ((v - running_mean[ci]) * inv_std[ci]) + be[ci]
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std };
        self.push("batchnorm", t, op, &[x, gamma, beta])
    }

    /// Inverted dropout. Eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::pre("dropout", format!("p={p} outside [0, 1)")));
        }
        if mode == Mode::Eval {
            return Ok(x);
        }
        let mut r = rng::rng(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len()).map(|_| if r.gen::<f64>() >= p { keep } else { 0.0 }).collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::dim("concat_channels", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(NumericsError::dim("concat_channels", format!("rank of {s0:?} < 2")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(NumericsError::dim(
                    "concat_channels",
                    format!("{s:?} vs {s0:?} differ outside axis 1"),
                ));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(s0[0] * channels * inner);
        for b in 0..s0[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let t = Tensor::new(shape, out)?;
        self.push("concat_channels", t, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| NumericsError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        self.reshape(x, &[s[0], s[1..].iter().product()])
    }

    /// Scales each channel map of `x[B, C, ...]` by `s[B, C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if sx.len() < 2 || ss != sx[..2] {
            return Err(NumericsError::dim("channel_scale", format!("scale {ss:?} vs axes 0,1 of {sx:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let sc = self.value(s).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, v)| v * sc[i / inner]).collect();
        let t = Tensor::new(sx, out)?;
        self.push("channel_scale", t, Op::ChannelScale { x, s }, &[x, s])
    }

    /// Row-wise `softmax(x / tau)` over the last axis of a rank-2 input.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(NumericsError::pre("softmax_with_temperature", format!("tau={tau} must be > 0")));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::dim("softmax_with_temperature", format!("expected rank 2, got {s:?}")));
        }
        let mut out = vec![0.0; s[0] * s[1]];
        kernels::softmax_rows(self.value(x).data(), s[1], tau, &mut out);
        let t = Tensor::new(s, out)?;
        self.push("softmax_with_temperature", t, Op::Softmax { x, tau }, &[x])
    }

    /// Mean over rows of `-sum(target * ln(pred + eps))`. Both inputs must be
    /// row-stochastic.
    pub fn cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("cross_entropy", pred, target)?;
        let s = self.shape(pred).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::dim("cross_entropy", format!("expected rank 2, got {s:?}")));
        }
        for (name, v) in [("pred", pred), ("target", target)] {
            check_stochastic(self.value(v), name)?;
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: f64 = p.iter().zip(t).map(|(&pv, &tv)| if tv == 0.0 { 0.0 } else { -tv * (pv + LOG_EPS).ln() }).sum();
        let v = Tensor::scalar(total / s[0] as f64);
        self.push("cross_entropy", v, Op::CrossEntropy { pred, target }, &[pred, target])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let x = self.value(a).data();
        let y = self.value(b).data();
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    // ---- reverse sweep ------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NumericsError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visit_order.clear();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.visit_order.push(i);
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds every bound parameter's gradient into `params[key].grad`.
    /// Frozen parameters are skipped.
    pub fn accumulate_into(&self, params: &mut [Parameter]) -> Result<()> {
        self.accumulate(params, 0, true)
    }

    /// Like [`Tape::accumulate_into`] for a store whose parameters were bound
    /// with keys `base..base + params.len()`; other keys are ignored.
    pub fn accumulate_range(&self, params: &mut [Parameter], base: usize) -> Result<()> {
        self.accumulate(params, base, false)
    }

    fn accumulate(&self, params: &mut [Parameter], base: usize, strict: bool) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(key) = node.param else { continue };
            let Some(g) = self.grads.get(i).and_then(Option::as_ref) else { continue };
            let local = key.checked_sub(base).filter(|k| *k < params.len());
            let Some(local) = local else {
                if strict {
                    return Err(NumericsError::pre("accumulate_into", format!("parameter key {key} out of range")));
                }
                continue;
            };
            let p = &mut params[local];
            if p.frozen {
                continue;
            }
            if p.grad.shape() != g.shape() {
                return Err(NumericsError::dim("accumulate_into", format!("{:?} vs {:?}", p.grad.shape(), g.shape())));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("gradient shape matches value"));
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let gd = g.data();
        // Ops only read from earlier nodes, so split the borrow at `i`.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let val = |v: Var| -> &Tensor { &before[v.0].value };
        let rg = |v: Var| before[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut da = vec![0.0; n * k];
                    kernels::gemm_a_bt(gd, val(*b).data(), &mut da, n, m, k);
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * m];
                    kernels::gemm_at_b(val(*a).data(), gd, &mut db, n, k, m);
                    out.push((*b, db));
                }
            }
            Op::BiasAdd(x, b) => {
                if rg(*x) {
                    out.push((*x, gd.to_vec()));
                }
                if rg(*b) {
                    let s = val(*x).shape();
                    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                    let mut db = vec![0.0; c];
                    for (j, v) in gd.iter().enumerate() {
                        db[(j / inner) % c] += v;
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gd.to_vec()));
                out.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gd.to_vec()));
                out.push((*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                out.push((*a, gd.iter().zip(y).map(|(g, y)| g * y).collect()));
                out.push((*b, gd.iter().zip(x).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(x, s) => out.push((*x, gd.iter().map(|g| g * s).collect())),
            Op::Sum(x) => out.push((*x, vec![gd[0]; val(*x).len()])),
            Op::Mean(x) => {
                let n = val(*x).len();
                out.push((*x, vec![gd[0] / n as f64; n]));
            }
            Op::Relu(x) => out.push((
                *x,
                val(*x).data().iter().zip(gd).map(|(&v, g)| if v > 0.0 { *g } else { 0.0 }).collect(),
            )),
            Op::Gelu(x) => out.push((*x, val(*x).data().iter().zip(gd).map(|(&v, g)| g * kernels::gelu_grad(v)).collect())),
            Op::Sigmoid(x) => out.push((*x, node.value.data().iter().zip(gd).map(|(&y, g)| g * y * (1.0 - y)).collect())),
            Op::Conv2d { x, w, geom } => {
                let sx = val(*x).shape();
                let out_ch = val(*w).shape()[0];
                let (q, p) = (geom.cols(), geom.positions());
                let in_sz = sx[1] * sx[2] * sx[3];
                let xin = val(*x).data();
                let wt = val(*w).data();
                let mut dx = if rg(*x) { Some(vec![0.0; xin.len()]) } else { None };
                let mut dw = if rg(*w) { Some(vec![0.0; wt.len()]) } else { None };
                let mut col = vec![0.0; q * p];
                let mut dcol = vec![0.0; q * p];
                for b in 0..sx[0] {
                    let gy = &gd[b * out_ch * p..(b + 1) * out_ch * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xin[b * in_sz..(b + 1) * in_sz], geom, &mut col);
                        kernels::gemm_a_bt(gy, &col, dw, out_ch, p, q);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcol.fill(0.0);
                        kernels::gemm_at_b(wt, gy, &mut dcol, out_ch, q, p);
                        kernels::col2im(&dcol, geom, &mut dx[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = val(*x).shape();
                let (ho, wo) = (s[2] / k, s[3] / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; val(*x).len()];
                for bc in 0..s[0] * s[1] {
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            dx[(bc * s[2] + i) * s[3] + j] = gd[(bc * ho + i / k) * wo + j / k] * norm;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let dx = (0..val(*x).len()).map(|j| gd[j / hw] / hw as f64).collect();
                out.push((*x, dx));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let s = val(*x).shape();
                let (b, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let n = (b * inner) as f64;
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ci = (j / inner) % c;
                    dgamma[ci] += gv * xh;
                    dbeta[ci] += gv;
                }
                if rg(*x) {
                    let dx = gd
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(j, (&gv, &xh))| {
                            let ci = (j / inner) % c;
                            gm[ci] * inv_std[ci] / n * (n * gv - dbeta[ci] - xh * dgamma[ci])
                        })
                        .collect();
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = val(*x).shape();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let gm = val(*gamma).data();
                let xin = val(*x).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xin.len()];
                for (j, &gv) in gd.iter().enumerate() {
                    let ci = (j / inner) % c;
                    dgamma[ci] += gv * (xin[j] - mean[ci]) * inv_std[ci];
                    dbeta[ci] += gv;
                    dx[j] = gv * gm[ci] * inv_std[ci];
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Dropout { x, mask } => out.push((*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect())),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut offset = 0;
                for &pv in parts {
                    let c = val(pv).shape()[1];
                    if rg(pv) {
                        let mut d = Vec::with_capacity(val(pv).len());
                        for b in 0..s[0] {
                            let base = (b * total_c + offset) * inner;
                            d.extend_from_slice(&gd[base..base + c * inner]);
                        }
                        out.push((pv, d));
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => out.push((*x, gd.to_vec())),
            Op::ChannelScale { x, s } => {
                let xin = val(*x).data();
                let sc = val(*s).data();
                let inner = xin.len() / sc.len();
                out.push((*x, gd.iter().enumerate().map(|(j, g)| g * sc[j / inner]).collect()));
                let mut ds = vec![0.0; sc.len()];
                for (j, g) in gd.iter().enumerate() {
                    ds[j / inner] += g * xin[j];
                }
                out.push((*s, ds));
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / tau;
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { pred, target } => {
                let rows = val(*pred).shape()[0] as f64;
                let p = val(*pred).data();
                let t = val(*target).data();
                let scale = gd[0] / rows;
                if rg(*pred) {
                    out.push((*pred, p.iter().zip(t).map(|(&pv, &tv)| -scale * tv / (pv + LOG_EPS)).collect()));
                }
                if rg(*target) {
                    out.push((*target, p.iter().map(|&pv| -scale * (pv + LOG_EPS).ln()).collect()));
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let k = 2.0 * gd[0] / x.len() as f64;
                let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| k * (p - q)).collect();
                out.push((*b, d.iter().map(|v| -v).collect()));
                out.push((*a, d));
            }
        }
        for (v, contrib) in out {
            if contrib.iter().any(|c| !c.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            self.acc(v, contrib);
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    kernels::im2col(x, g, col)
}

/// Fails unless every row of `t` sums to one within [`STOCHASTIC_TOL`] and has no negative entries.
pub fn check_stochastic(t: &Tensor, name: &str) -> Result<()> {
    let cols = t.shape()[t.rank() - 1];
    for (r, row) in t.data().chunks(cols).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < -STOCHASTIC_TOL) {
            return Err(NumericsError::Validation {
                op: "cross_entropy",
                detail: format!("{name} row {r} sums to {sum}, not a probability distribution"),
            });
        }
    }
    Ok(())
}
