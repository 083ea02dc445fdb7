//! Reverse-mode differentiation over an explicit computation record.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are registered with
//! [`Graph::param`] (gradient tracked) or [`Graph::constant`]; every operator
//! appends a node holding its output value plus whatever it needs for the
//! backward pass. [`Graph::backward`] walks the record in reverse and returns the
//! gradient of a scalar node with respect to every tracked leaf.

use std::sync::Arc;

use rustfft::num_complex::Complex;

use super::conv::{self, conv_out_len, conv_transpose_base_len, Geom};
use crate::dsp::{MelFilterbank, StftPlan};
use crate::error::{dim_err, NdfError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Lower/upper clamp applied to probabilities inside [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Statistics source for [`Graph::cond_batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with externally tracked running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy { x: Var, s: Var },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    ScaledSoftsign { x: Var, a: Var },
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    ConcatCols(Var, Var),
    SelectRows { x: Var, rows: Vec<usize> },
    SelectChannel { x: Var, channel: usize },
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Geom,
        transposed: bool,
    },
    CondBatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        labels: Vec<usize>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    ImqKernel { a: Var, b: Var, scale: f64 },
    StftMag {
        x: Var,
        plan: Arc<StftPlan>,
        spectra: Vec<Vec<Complex<f64>>>,
    },
    MelProject { x: Var, bank: Arc<MelFilterbank> },
    Bce { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` is a constant
    /// or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros shaped like `like` for untouched leaves.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &str, detail: impl std::fmt::Display) -> Result<T> {
    dim_err(format!("{op}: {detail}"))
}

/// Leading batch size and per-sample shape of a possibly unbatched input.
fn split_batch(shape: &[usize], unbatched_rank: usize) -> Option<(usize, &[usize], bool)> {
    if shape.len() == unbatched_rank {
        Some((1, shape, false))
    } else if shape.len() == unbatched_rank + 1 {
        Some((shape[0], &shape[1..], true))
    } else {
        None
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    /// `s · x` for a single-element tensor `s` (e.g. a trainable scalar).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", "scale must hold exactly one value");
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| k * v);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(NdfError::NumericFailure(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(NdfError::NumericFailure(format!("sqrt of negative value {v}")));
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `a · x / (1 + |x|)` with a single-element trainable scale `a`.
    pub fn scaled_softsign(&mut self, x: Var, a: Var) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return shape_err("scaled_softsign", "scale must hold exactly one value");
        }
        let k = self.value(a).item();
        let out = self.value(x).map(|v| k * v / (1.0 + v.abs()));
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(out, Op::ScaledSoftsign { x, a }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Sums every axis but the first: `[N, ...] → [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let data = (0..n).map(|i| v.outer(i).iter().sum()).collect();
        let out = Tensor::from_parts(vec![n], data);
        let rg = self.rg(x);
        self.push(out, Op::SumPerSample(x), rg)
    }

    /// `Σ x · weights` for constant weights of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err("weighted_sum", "weights must match input size");
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?}, weight {ws:?}"));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return shape_err("linear", format!("bias {:?}", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * fan_out];
        for i in 0..n {
            let row = &xv[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &wv[o * fan_in..(o + 1) * fan_in];
                out[i * fan_out + o] = row.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for i in 0..n {
                for o in 0..fan_out {
                    out[i * fan_out + o] += bv[o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, fan_out], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// Concatenates `[N, p]` and `[N, q]` into `[N, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return shape_err("concat_cols", format!("{sa:?} vs {sb:?}"));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&va[i * p..(i + 1) * p]);
            out.extend_from_slice(&vb[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, p + q], out),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Gathers entries of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return shape_err("select_rows", format!("rows {rows:?} out of 0..{n}"));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let data = rows.iter().flat_map(|&r| v.outer(r).iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `[N, C, T] → [N, T]` for one channel.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || channel >= s[1] {
            return shape_err("select_channel", format!("channel {channel} of {s:?}"));
        }
        let (n, c, t) = (s[0], s[1], s[2]);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * t);
        for i in 0..n {
            let off = (i * c + channel) * t;
            out.extend_from_slice(&v[off..off + t]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, t], out),
            Op::SelectChannel { x, channel },
            rg,
        ))
    }

    fn conv_common(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Geom,
        transposed: bool,
        n: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let out_channels = if transposed { geom.c_big } else { geom.c_small };
        if let Some(b) = bias {
            if self.shape(b) != [out_channels] {
                return shape_err("conv", format!("bias {:?}", self.shape(b)));
            }
        }
        let (in_len, out_len) = if transposed {
            (geom.small_len(), geom.big_len())
        } else {
            (geom.big_len(), geom.small_len())
        };
        let xv = self.value(input).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; n * out_len];
        for i in 0..n {
            let src = &xv[i * in_len..(i + 1) * in_len];
            let dst = &mut out[i * out_len..(i + 1) * out_len];
            if transposed {
                conv::scatter(&geom, src, kv, dst);
            } else {
                conv::gather(&geom, src, kv, dst);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let spatial = out_len / out_channels;
            for chunk in out.chunks_mut(spatial).enumerate() {
                let c = chunk.0 % out_channels;
                chunk.1.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                transposed,
            },
            rg,
        ))
    }

    /// 2-D convolution. `input` is `[C_in, H, W]` or `[N, C_in, H, W]`, `kernel`
    /// is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let Some((n, s, batched)) = split_batch(self.shape(input), 3) else {
            return shape_err("conv2d", format!("input {:?}", self.shape(input)));
        };
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[1] != s[0] {
            return shape_err("conv2d", format!("kernel {ks:?} for input {:?}", s));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_len(s[1], ks[2], stride.0, pad.0),
            conv_out_len(s[2], ks[3], stride.1, pad.1),
        ) else {
            return shape_err("conv2d", format!("kernel {ks:?} larger than padded input {s:?}"));
        };
        let geom = Geom {
            c_small: ks[0],
            h_small: ho,
            w_small: wo,
            c_big: s[0],
            h_big: s[1],
            w_big: s[2],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        let mut out_shape = vec![ks[0], ho, wo];
        if batched {
            out_shape.insert(0, n);
        }
        self.conv_common(input, kernel, bias, geom, false, n, out_shape)
    }

    /// 2-D transposed convolution producing exactly `out_hw`. `kernel` is
    /// `[C_in, C_out, kh, kw]`. The requested size must lie in
    /// `[base, base + stride)` per axis, where `base = (H-1)·s - 2p + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let Some((n, s, batched)) = split_batch(self.shape(input), 3) else {
            return shape_err("conv_transpose2d", format!("input {:?}", self.shape(input)));
        };
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[0] != s[0] {
            return shape_err("conv_transpose2d", format!("kernel {ks:?} for input {s:?}"));
        }
        for (axis, (len, k, st, p, target)) in [
            (s[1], ks[2], stride.0, pad.0, out_hw.0),
            (s[2], ks[3], stride.1, pad.1, out_hw.1),
        ]
        .into_iter()
        .enumerate()
        {
            let full = conv_transpose_base_len(len, k, st);
            if full < 2 * p + 1 || target < full - 2 * p || target >= full - 2 * p + st {
                return shape_err(
                    "conv_transpose2d",
                    format!("axis {axis}: size {target} unreachable from {len} (k={k}, s={st}, p={p})"),
                );
            }
        }
        let geom = Geom {
            c_small: s[0],
            h_small: s[1],
            w_small: s[2],
            c_big: ks[1],
            h_big: out_hw.0,
            w_big: out_hw.1,
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        let mut out_shape = vec![ks[1], out_hw.0, out_hw.1];
        if batched {
            out_shape.insert(0, n);
        }
        self.conv_common(input, kernel, bias, geom, true, n, out_shape)
    }

    /// Bias-free 1-D transposed convolution cropped symmetrically to `out_len`.
    /// `input` is `[C_in, T]` or `[N, C_in, T]`, `kernel` is `[C_in, C_out, f]`.
    /// Requires `(T-1)·s + 1 ≤ out_len ≤ (T-1)·s + f`; when the crop is odd the
    /// extra sample is removed from the end.
    pub fn conv_transpose1d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        out_len: usize,
    ) -> Result<Var> {
        let Some((n, s, batched)) = split_batch(self.shape(input), 2) else {
            return shape_err("conv_transpose1d", format!("input {:?}", self.shape(input)));
        };
        let ks = self.shape(kernel);
        if ks.len() != 3 || ks[0] != s[0] || stride == 0 {
            return shape_err("conv_transpose1d", format!("kernel {ks:?} for input {s:?}"));
        }
        let (t, f) = (s[1], ks[2]);
        let base = conv_transpose_base_len(t, f, stride);
        let min = (t - 1) * stride + 1;
        if out_len > base || out_len < min {
            return shape_err(
                "conv_transpose1d",
                format!("length {out_len} unreachable from {t} (allowed {min}..={base})"),
            );
        }
        let geom = Geom {
            c_small: s[0],
            h_small: 1,
            w_small: t,
            c_big: ks[1],
            h_big: 1,
            w_big: out_len,
            kh: 1,
            kw: f,
            sh: 1,
            sw: stride,
            ph: 0,
            pw: (base - out_len) / 2,
        };
        let mut out_shape = vec![ks[1], out_len];
        if batched {
            out_shape.insert(0, n);
        }
        self.conv_common(input, kernel, None, geom, true, n, out_shape)
    }

    /// Class-conditional batch normalization over `x: [N, C, ...]`.
    ///
    /// Statistics are shared across the batch per channel; the affine parameters
    /// `gamma`, `beta` (`[n_classes, C]`) are picked per sample by `labels`.
    /// In [`BnMode::Batch`] the batch statistics are also returned so the caller
    /// can update its running estimates.
    pub fn cond_batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        labels: &[usize],
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gamma).to_vec();
        if xs.len() < 2 || gs.len() != 2 || gs[1] != xs[1] || self.shape(beta) != gs.as_slice() {
            return shape_err("cond_batch_norm", format!("x {xs:?}, gamma {gs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let n_classes = gs[0];
        if labels.len() != n {
            return shape_err("cond_batch_norm", format!("{} labels for {n} samples", labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(NdfError::Label { label, n_classes });
        }
        let spatial: usize = xs[2..].iter().product();
        let count = (n * spatial) as f64;
        let xv = self.value(x).data();

        let (mean, var, eps, stats) = match mode {
            BnMode::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        s += xv[off..off + spatial].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        ss += xv[off..off + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, eps, Some(stats))
            }
            BnMode::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("cond_batch_norm", "running statistics size");
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            let k = labels[i];
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                let (g, b) = (gv[k * c + ch], bv[k * c + ch]);
                for j in off..off + spatial {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g * h + b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(xs, out),
            Op::CondBatchNorm {
                x,
                gamma,
                beta,
                labels: labels.to_vec(),
                xhat,
                inv_std,
                batch: stats.is_some(),
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverse-multiquadratics kernel matrix `K[i, j] = C / (C + ‖a_i − b_j‖²)`
    /// between the rows of `a: [n, d]` and `b: [m, d]`.
    pub fn imq_kernel(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("imq_kernel", format!("{sa:?} vs {sb:?}"));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let dist: f64 = va[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vb[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out[i * m + j] = scale / (scale + dist);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::ImqKernel { a, b, scale },
            rg,
        ))
    }

    /// STFT magnitudes of each row of `x: [N, L]`, giving `[N, n_bins, L / hop]`.
    pub fn stft_magnitude(&mut self, x: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err("stft_magnitude", format!("input {s:?}"));
        }
        let (n, len) = (s[0], s[1]);
        let frames = plan.n_frames(len);
        let mut out = Vec::with_capacity(n * plan.n_bins() * frames);
        let mut spectra = Vec::with_capacity(n);
        for i in 0..n {
            let (mags, spec) = plan.analyze(self.value(x).outer(i))?;
            out.extend(mags);
            spectra.push(spec);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, plan.n_bins(), frames], out),
            Op::StftMag {
                x,
                plan: Arc::clone(plan),
                spectra: if rg { spectra } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Applies a Mel filterbank to `x: [N, n_bins, T]`, giving `[N, n_mels, T]`.
    pub fn mel_project(&mut self, x: Var, bank: &Arc<MelFilterbank>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != bank.n_bins() {
            return shape_err("mel_project", format!("input {s:?} for {} bins", bank.n_bins()));
        }
        let (n, frames) = (s[0], s[2]);
        let per_in = bank.n_bins() * frames;
        let per_out = bank.n_mels() * frames;
        let mut out = vec![0.0; n * per_out];
        let xv = self.value(x).data();
        for i in 0..n {
            bank.project_into(
                &xv[i * per_in..(i + 1) * per_in],
                frames,
                &mut out[i * per_out..(i + 1) * per_out],
            );
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, bank.n_mels(), frames], out),
            Op::MelProject {
                x,
                bank: Arc::clone(bank),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` against constant `target`.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return shape_err("bce", format!("{} predictions, {} targets", p.numel(), target.len()));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(total / target.len() as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Gradient of the single-element node `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", format!("loss has shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, g.data(), &mut grads);
        }
        // Only leaves keep gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulation buffer for `v`, or `None` if `v` is not tracked.
    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.shape(v);
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.buf(grads, v) {
                        buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.buf(grads, *a) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv);
                }
            }
            Op::Mul(a, b) => {
                let other_b = self.value(*b).data();
                if let Some(buf) = self.buf(grads, *a) {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(other_b) {
                        *o += gv * bv;
                    }
                }
                let other_a = self.value(*a).data();
                if let Some(buf) = self.buf(grads, *b) {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(other_a) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += c * gv);
                }
            }
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += k * gv);
                }
                if let Some(buf) = self.buf(grads, *s) {
                    buf[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Relu(x) => self.elementwise(grads, *x, g, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }, y),
            Op::Elu(x) => self.elementwise(grads, *x, g, |xv, yv| if xv > 0.0 { 1.0 } else { yv + 1.0 }, y),
            Op::Sigmoid(x) => self.elementwise(grads, *x, g, |_, yv| yv * (1.0 - yv), y),
            Op::Log(x) => self.elementwise(grads, *x, g, |xv, _| 1.0 / xv, y),
            Op::Sqrt(x) => {
                self.elementwise(grads, *x, g, |_, yv| if yv > 0.0 { 0.5 / yv } else { 0.0 }, y)
            }
            Op::Abs(x) => self.elementwise(grads, *x, g, |xv, _| sign(xv), y),
            Op::Square(x) => self.elementwise(grads, *x, g, |xv, _| 2.0 * xv, y),
            Op::ScaledSoftsign { x, a } => {
                let k = self.value(*a).item();
                let xv = self.value(*x).data();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((o, gv), v) in buf.iter_mut().zip(g).zip(xv) {
                        let d = 1.0 + v.abs();
                        *o += gv * k / (d * d);
                    }
                }
                if let Some(buf) = self.buf(grads, *a) {
                    buf[0] += g
                        .iter()
                        .zip(xv)
                        .map(|(gv, v)| gv * v / (1.0 + v.abs()))
                        .sum::<f64>();
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    let d = g[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|o| *o += d);
                }
            }
            Op::SumPerSample(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    let per = buf.len() / g.len();
                    for (i, chunk) in buf.chunks_mut(per).enumerate() {
                        chunk.iter_mut().for_each(|o| *o += g[i]);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(weights).for_each(|(o, w)| *o += g[0] * w);
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
                }
            }
            Op::Linear { x, w, b } => self.backward_linear(grads, *x, *w, *b, g),
            Op::ConcatCols(a, b) => {
                let n = self.shape(*a)[0];
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                if let Some(buf) = self.buf(grads, *a) {
                    for i in 0..n {
                        for j in 0..p {
                            buf[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for i in 0..n {
                        for j in 0..q {
                            buf[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(buf) = self.buf(grads, *x) {
                    let per = g.len() / rows.len();
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..per {
                            buf[r * per + j] += g[k * per + j];
                        }
                    }
                }
            }
            Op::SelectChannel { x, channel } => {
                let s = self.shape(*x);
                let (n, c, t) = (s[0], s[1], s[2]);
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..n {
                        let off = (i * c + channel) * t;
                        for j in 0..t {
                            buf[off + j] += g[i * t + j];
                        }
                    }
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                transposed,
            } => self.backward_conv(grads, *input, *kernel, *bias, geom, *transposed, g),
            Op::CondBatchNorm {
                x,
                gamma,
                beta,
                labels,
                xhat,
                inv_std,
                batch,
            } => self.backward_bn(grads, *x, *gamma, *beta, labels, xhat, inv_std, *batch, g),
            Op::ImqKernel { a, b, scale } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dK/da_i = -2 K² / C · (a_i - b_j)
                let coef = |i: usize, j: usize| -> f64 {
                    let k = y[i * m + j];
                    -2.0 * k * k / scale * g[i * m + j]
                };
                if let Some(buf) = self.buf(grads, *a) {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            for t in 0..d {
                                buf[i * d + t] += c * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            for t in 0..d {
                                buf[j * d + t] -= c * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::StftMag { x, plan, spectra } => {
                let len = self.shape(*x)[1];
                let per = g.len() / spectra.len().max(1);
                if let Some(buf) = self.buf(grads, *x) {
                    for (i, spec) in spectra.iter().enumerate() {
                        let gx = plan.backward(len, spec, &g[i * per..(i + 1) * per]);
                        for (o, v) in buf[i * len..(i + 1) * len].iter_mut().zip(gx) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MelProject { x, bank } => {
                let s = self.shape(*x);
                let (n, frames) = (s[0], s[2]);
                let per_in = bank.n_bins() * frames;
                let per_out = bank.n_mels() * frames;
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..n {
                        bank.project_transpose_into(
                            &g[i * per_out..(i + 1) * per_out],
                            frames,
                            &mut buf[i * per_in..(i + 1) * per_in],
                        );
                    }
                }
            }
            Op::Bce { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = g[0] / target.len() as f64;
                if let Some(buf) = self.buf(grads, *pred) {
                    for ((o, &p), &t) in buf.iter_mut().zip(pv).zip(target) {
                        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                            *o += scale * (p - t) / (p * (1.0 - p));
                        }
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        y: &[f64],
    ) {
        let xv = self.value(x).data();
        if let Some(buf) = self.buf(grads, x) {
            for (i, o) in buf.iter_mut().enumerate() {
                *o += g[i] * deriv(xv[i], y[i]);
            }
        }
    }

    fn backward_linear(&self, grads: &mut [Option<Tensor>], x: Var, w: Var, b: Option<Var>, g: &[f64]) {
        let (n, fan_in) = (self.shape(x)[0], self.shape(x)[1]);
        let fan_out = self.shape(w)[0];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        if let Some(buf) = self.buf(grads, x) {
            for i in 0..n {
                let row = &mut buf[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let gv = g[i * fan_out + o];
                    if gv == 0.0 {
                        continue;
                    }
                    for (r, wk) in row.iter_mut().zip(&wv[o * fan_in..(o + 1) * fan_in]) {
                        *r += gv * wk;
                    }
                }
            }
        }
        if let Some(buf) = self.buf(grads, w) {
            for i in 0..n {
                let row = &xv[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let gv = g[i * fan_out + o];
                    if gv == 0.0 {
                        continue;
                    }
                    for (wk, xk) in buf[o * fan_in..(o + 1) * fan_in].iter_mut().zip(row) {
                        *wk += gv * xk;
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(buf) = self.buf(grads, b) {
                for i in 0..n {
                    for o in 0..fan_out {
                        buf[o] += g[i * fan_out + o];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        grads: &mut [Option<Tensor>],
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: &Geom,
        transposed: bool,
        g: &[f64],
    ) {
        let (small_len, big_len) = (geom.small_len(), geom.big_len());
        let (in_len, out_len) = if transposed {
            (small_len, big_len)
        } else {
            (big_len, small_len)
        };
        let n = g.len() / out_len;
        let xv = self.value(input).data();
        let kv = self.value(kernel).data();
        if let Some(buf) = self.buf(grads, input) {
            for i in 0..n {
                let go = &g[i * out_len..(i + 1) * out_len];
                let gi = &mut buf[i * in_len..(i + 1) * in_len];
                if transposed {
                    conv::gather(geom, go, kv, gi);
                } else {
                    conv::scatter(geom, go, kv, gi);
                }
            }
        }
        if let Some(buf) = self.buf(grads, kernel) {
            for i in 0..n {
                let go = &g[i * out_len..(i + 1) * out_len];
                let x = &xv[i * in_len..(i + 1) * in_len];
                if transposed {
                    conv::kernel_grad(geom, x, go, buf);
                } else {
                    conv::kernel_grad(geom, go, x, buf);
                }
            }
        }
        if let Some(b) = bias {
            if let Some(buf) = self.buf(grads, b) {
                let channels = buf.len();
                let spatial = out_len / channels;
                for (k, chunk) in g.chunks(spatial).enumerate() {
                    buf[k % channels] += chunk.iter().sum::<f64>();
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_bn(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        gamma: Var,
        beta: Var,
        labels: &[usize],
        xhat: &[f64],
        inv_std: &[f64],
        batch: bool,
        g: &[f64],
    ) {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let gv = self.value(gamma).data();
        if let Some(buf) = self.buf(grads, gamma) {
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * spatial;
                    let s: f64 = (off..off + spatial).map(|j| g[j] * xhat[j]).sum();
                    buf[labels[i] * c + ch] += s;
                }
            }
        }
        if let Some(buf) = self.buf(grads, beta) {
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * spatial;
                    buf[labels[i] * c + ch] += g[off..off + spatial].iter().sum::<f64>();
                }
            }
        }
        if let Some(buf) = self.buf(grads, x) {
            let count = (n * spatial) as f64;
            for ch in 0..c {
                // gradient w.r.t. normalized values: g · gamma[label]
                let dxhat = |i: usize, j: usize| g[j] * gv[labels[i] * c + ch];
                if batch {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            let d = dxhat(i, j);
                            sum_d += d;
                            sum_dx += d * xhat[j];
                        }
                    }
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            let d = dxhat(i, j);
                            buf[j] += inv_std[ch] / count * (count * d - sum_d - xhat[j] * sum_dx);
                        }
                    }
                } else {
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            buf[j] += dxhat(i, j) * inv_std[ch];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
