//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. [`Graph::backward`] walks the tape in exact reverse
//! insertion order, so gradient accumulation order is fixed for a given
//! program.

use super::conv::{self, ConvGeom};
use super::kernels::{check_conv1d, conv1d_rows, resize_planes, resize_planes_backward, softmax_strided};
use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

/// Backward rule of a user-defined op: `(grad_out, inputs) -> grad per input`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Normalization mode for [`Graph::batch_norm`].
pub enum NormMode<'a, T> {
    /// Batch statistics; the op reports them so the caller can update running stats.
    Train { eps: f64 },
    /// Fixed statistics.
    Eval {
        mean: &'a [T],
        var: &'a [T],
        eps: f64,
    },
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Pool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    AddBias {
        x: Var,
        b: Var,
        len: usize,
        inner: usize,
    },
    ChannelMul {
        x: Var,
        g: Var,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunk: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    RepeatBatch {
        x: Var,
        times: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        channels: usize,
        inner: usize,
    },
    Resize {
        x: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
        ignore: u8,
        classes: usize,
        inner: usize,
        count: usize,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        omega: T,
        clamped: Vec<bool>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// The tape. Generic over the element type so the same model code runs in
/// `f32`, `f64`, or an instrumented scalar.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Operation name recorded for a node (diagnostics only).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        #[cfg(debug_assertions)]
        if !value.all_finite() && inputs.iter().all(|v| self.value(*v).all_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product; rank-2 or batched rank-3 operands.
    ///
    /// `ta`/`tb` transpose the trailing two axes of the respective operand. A
    /// rank-2 operand, or a rank-3 operand with batch 1, is broadcast over the
    /// batch of the other.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let plan = MatPlan::new(self.shape(a), self.shape(b), ta, tb)
            .ok_or_else(|| TensorError::shape("matmul", self.shape(a), self.shape(b)))?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..plan.batch {
            T::gemm(
                plan.m,
                plan.k,
                plan.n,
                &ad[plan.a_off(bi)..],
                plan.sa,
                &bd[plan.b_off(bi)..],
                plan.sb,
                &mut out[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                (plan.n, 1),
                false,
            );
        }
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    // ----- convolution ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        self.conv2d_padded(x, w, b, stride, (pad, pad))
    }

    /// Convolution with separate zero padding before and after each spatial axis.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::with_padding(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(TensorError::shape("conv2d bias", self.shape(b), &[geom.cout]));
            }
        }
        let (out, cols) = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Same-length 1-D convolution along the last axis of `x`; `w` is `[k]`, `b` is `[1]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(w).rank() != 1 || self.value(b).numel() != 1 || self.value(x).rank() == 0 {
            return Err(TensorError::shape("conv1d_same", self.shape(x), self.shape(w)));
        }
        let k = self.value(w).numel();
        check_conv1d(k)?;
        let c = *self.shape(x).last().unwrap();
        let mut out = vec![T::zero(); self.value(x).numel()];
        conv1d_rows(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).item(),
            c,
            &mut out,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("conv1d_same", value, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Global pooling of `[B, C, H, W]` (or any rank ≥ 3) over the trailing spatial axes → `[B, C]`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || shape[2..].iter().product::<usize>() == 0 {
            return Err(TensorError::config("global_pool", format!("bad input shape {shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        let mut argmax = Vec::new();
        for plane in xd.chunks(inner) {
            match mode {
                PoolMode::Avg => {
                    let s: T = plane.iter().copied().sum();
                    out.push(s / T::from_usize(inner));
                }
                PoolMode::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(plane[best]);
                }
            }
        }
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        self.push("global_pool", value, Op::Pool { x, mode, argmax }, &[x])
    }

    // ----- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::config("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = softmax_strided(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(shape, data)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Per-channel normalisation of `x[B, C, ...]`.
    ///
    /// Returns the output and, in train mode, the biased batch mean and
    /// variance per channel.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>), TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(TensorError::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let n = xd.len();
        let mut out = vec![T::zero(); n];
        let mut xhat = vec![T::zero(); n];
        let mut inv_std = vec![T::zero(); channels];
        let (train, stats) = match mode {
            NormMode::Train { eps } => {
                let count = batch * inner;
                if count < 2 {
                    return Err(TensorError::config(
                        "batch_norm",
                        format!("train mode needs at least 2 values per channel, got {count}"),
                    ));
                }
                let cnt = T::from_usize(count);
                let mut means = vec![T::zero(); channels];
                let mut vars = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + c) * inner;
                        for &v in &xd[off..off + inner] {
                            s += v;
                        }
                    }
                    let mean = s / cnt;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + c) * inner;
                        for &v in &xd[off..off + inner] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / cnt;
                    let is = T::one() / (var + T::from_f64(eps)).sqrt();
                    for b in 0..batch {
                        let off = (b * channels + c) * inner;
                        for i in off..off + inner {
                            let h = (xd[i] - mean) * is;
                            xhat[i] = h;
                            out[i] = gd[c] * h + bd[c];
                        }
                    }
                    means[c] = mean;
                    vars[c] = var;
                    inv_std[c] = is;
                }
                (true, Some((means, vars)))
            }
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(TensorError::shape("batch_norm stats", &shape, &[mean.len()]));
                }
                for c in 0..channels {
                    let denom = (var[c] + T::from_f64(eps)).sqrt();
                    let is = T::one() / denom;
                    let scale = gd[c] * is;
                    let shift = bd[c] - mean[c] * scale;
                    inv_std[c] = is;
                    for b in 0..batch {
                        let off = (b * channels + c) * inner;
                        for i in off..off + inner {
                            out[i] = xd[i] * scale + shift;
                            xhat[i] = (xd[i] - mean[c]) / denom;
                        }
                    }
                }
                (false, None)
            }
        };
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                inner,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    // ----- pointwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let zero = T::zero();
        let value = self.value(x).map(|v| if v > zero { v } else { zero });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// Adds `b[len]` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return Err(TensorError::shape("add_bias", &shape, self.shape(b)));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let bd = self.value(b).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % len])
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("add_bias", value, Op::AddBias { x, b, len, inner }, &[x, b])
    }

    /// `x[B, C, ...] * g[B, C]`, broadcasting `g` over the trailing axes.
    pub fn channel_mul(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(g) != [shape[0], shape[1]] {
            return Err(TensorError::shape("broadcast_channel_mul", &shape, self.shape(g)));
        }
        let inner: usize = shape[2..].iter().product();
        let gd = self.value(g).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i / inner])
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("broadcast_channel_mul", value, Op::ChannelMul { x, g, inner }, &[x, g])
    }

    // ----- shape ----------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::config("concat", format!("axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunk = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::shape("concat", &first, s));
            }
            total += s[axis];
            chunk.push(s[axis] * inner);
        }
        let row: usize = chunk.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunk) {
                data.extend_from_slice(&self.value(*p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunk,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Repeats a batch-1 tensor `times` along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || times == 0 {
            return Err(TensorError::config("repeat_batch", format!("needs leading axis 1, got {shape:?}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[0] = times;
        let value = Tensor::new(out_shape, data)?;
        self.push("repeat_batch", value, Op::RepeatBatch { x, times }, &[x])
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres, clamped).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || oh == 0 || ow == 0 || shape[r - 1] == 0 || shape[r - 2] == 0 {
            return Err(TensorError::config("resize_bilinear", format!("cannot resize {shape:?}")));
        }
        let from = (shape[r - 2], shape[r - 1]);
        let planes = self.value(x).numel() / (from.0 * from.1);
        let data = resize_planes(self.value(x).data(), planes, from, (oh, ow));
        let mut out_shape = shape;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "resize_bilinear",
            value,
            Op::Resize {
                x,
                planes,
                from,
                to: (oh, ow),
            },
            &[x],
        )
    }

    /// Integer-factor bilinear upsampling of the two trailing axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        if factor == 0 {
            return Err(TensorError::config("bilinear_upsample", "factor must be ≥ 1"));
        }
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::config("bilinear_upsample", "rank < 2"));
        }
        let (h, w) = (self.shape(x)[r - 2], self.shape(x)[r - 1]);
        self.resize_bilinear(x, h * factor, w * factor)
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        let value = Tensor::scalar(self.value(x).sum() / T::from_usize(n.max(1)));
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    /// Mean softmax cross-entropy of `logits[B, N, ...]` against `labels`
    /// (one per pixel, `B * prod(...)` in total), skipping `ignore`.
    ///
    /// Returns the loss node and the number of labelled pixels; with zero
    /// labelled pixels the loss is exactly 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore: u8,
    ) -> Result<(Var, usize), TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("seg_loss", &shape, &[labels.len()]));
        }
        let (batch, classes) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if labels.len() != batch * inner {
            return Err(TensorError::shape("seg_loss", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
            return Err(TensorError::config("seg_loss", format!("label {bad} outside [0, {classes})")));
        }
        let xd = self.value(logits).data();
        let probs = softmax_strided(xd, batch, classes, inner);
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..batch {
            for i in 0..inner {
                let l = labels[b * inner + i];
                if l == ignore {
                    continue;
                }
                // -log softmax via log-sum-exp
                let at = |c: usize| xd[(b * classes + c) * inner + i];
                let mut mx = at(0);
                for c in 1..classes {
                    mx = mx.max_of(at(c));
                }
                let mut s = T::zero();
                for c in 0..classes {
                    s += (at(c) - mx).exp();
                }
                total += s.ln() - (at(l as usize) - mx);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count)
        };
        let v = self.push(
            "seg_loss",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                classes,
                inner,
                count,
            },
            &[logits],
        )?;
        Ok((v, count))
    }

    /// Mean of `-ω [t ln p + (1 - t) ln(1 - p)]` over every entry, with `p`
    /// clamped to `[eps, 1 - eps]`. Also returns how many entries were clamped.
    pub fn bce(
        &mut self,
        p: Var,
        target: &Tensor<T>,
        omega: f64,
        eps: f64,
    ) -> Result<(Var, usize), TensorError> {
        if self.shape(p) != target.shape() {
            return Err(TensorError::shape("cp_loss", self.shape(p), target.shape()));
        }
        let lo = T::from_f64(eps);
        let hi = T::from_f64(1.0 - eps);
        let omega = T::from_f64(omega);
        let one = T::one();
        let mut clamped = Vec::with_capacity(target.numel());
        let mut total = T::zero();
        for (&pv, &t) in self.value(p).data().iter().zip(target.data()) {
            let c = !(pv >= lo && pv <= hi);
            clamped.push(c);
            let q = if pv < lo {
                lo
            } else if pv > hi {
                hi
            } else {
                pv
            };
            total += -(omega * (t * q.ln() + (one - t) * (one - q).ln()));
        }
        let n = clamped.len();
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let loss = total / T::from_usize(n.max(1));
        let v = self.push(
            "cp_loss",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                omega,
                clamped,
            },
            &[p],
        )?;
        Ok((v, n_clamped))
    }

    /// An op with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var, TensorError> {
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    // ----- backward ---------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::ones(&seed_shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &gout)?;
            self.grads[i] = Some(gout);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.shape(input), "grad shape for {}", self.nodes[i].name);
                match &mut self.grads[input.0] {
                    Some(acc) => add_into(acc.data_mut(), g.data()),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let node = &self.nodes[i];
        let gd = gout.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let plan = MatPlan::new(self.shape(*a), self.shape(*b), *ta, *tb).expect("validated");
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..plan.batch {
                        let off = plan.a_off(bi);
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &bd[plan.b_off(bi)..],
                            (plan.sb.1, plan.sb.0),
                            &mut da[off..],
                            plan.sa,
                            true,
                        );
                    }
                    out.push((*a, like(*a, da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..plan.batch {
                        let off = plan.b_off(bi);
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[plan.a_off(bi)..],
                            (plan.sa.1, plan.sa.0),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &mut db[off..],
                            plan.sb,
                            true,
                        );
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let g = conv::backward(geom, cols, self.value(*w).data(), gd);
                out.push((*x, like(*x, g.dx)?));
                out.push((*w, like(*w, g.dw)?));
                if let Some(b) = b {
                    out.push((*b, like(*b, g.db)?));
                }
            }
            Op::Conv1d { x, w, b } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let c = *self.shape(*x).last().unwrap();
                let half = (wd.len() / 2) as isize;
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                let mut dbias = T::zero();
                for ((row, grow), dxrow) in xd.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    for (i, &g) in grow.iter().enumerate() {
                        dbias += g;
                        for (j, &wj) in wd.iter().enumerate() {
                            let src = i as isize + j as isize - half;
                            if src >= 0 && (src as usize) < c {
                                dw[j] += g * row[src as usize];
                                dxrow[src as usize] += g * wj;
                            }
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
                out.push((*w, like(*w, dw)?));
                out.push((*b, like(*b, vec![dbias])?));
            }
            Op::Pool { x, mode, argmax } => {
                let shape = self.shape(*x);
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (p, &g) in gd.iter().enumerate() {
                    match mode {
                        PoolMode::Avg => {
                            let share = g / T::from_usize(inner);
                            for v in &mut dx[p * inner..(p + 1) * inner] {
                                *v = share;
                            }
                        }
                        PoolMode::Max => dx[p * inner + argmax[p]] = g,
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            let idx = base + j * inner;
                            dot += gd[idx] * y[idx];
                        }
                        for j in 0..*len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (gd[idx] - dot);
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Add { a, b } => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, like(*a, gd.iter().zip(bd).map(|(&g, &v)| g * v).collect())?));
                out.push((*b, like(*b, gd.iter().zip(ad).map(|(&g, &v)| g * v).collect())?));
            }
            Op::Scale { x, c } => {
                out.push((*x, gout.map(|g| g * *c)));
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let one = T::one();
                out.push((*x, like(*x, gd.iter().zip(y).map(|(&g, &s)| g * s * (one - s)).collect())?));
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let zero = T::zero();
                out.push((
                    *x,
                    like(*x, gd.iter().zip(xd).map(|(&g, &v)| if v > zero { g } else { zero }).collect())?,
                ));
            }
            Op::AddBias { x, b, len, inner } => {
                let mut db = vec![T::zero(); *len];
                for (i, &g) in gd.iter().enumerate() {
                    db[(i / inner) % len] += g;
                }
                out.push((*x, gout.clone()));
                out.push((*b, like(*b, db)?));
            }
            Op::ChannelMul { x, g, inner } => {
                let xd = self.value(*x).data();
                let gv = self.value(*g).data();
                let dx: Vec<T> = gd.iter().enumerate().map(|(i, &d)| d * gv[i / inner]).collect();
                let mut dg = vec![T::zero(); gv.len()];
                for (i, (&d, &v)) in gd.iter().zip(xd).enumerate() {
                    dg[i / inner] += d * v;
                }
                out.push((*x, like(*x, dx)?));
                out.push((*g, like(*g, dg)?));
            }
            Op::Concat { parts, outer, chunk } => {
                let row: usize = chunk.iter().sum();
                let mut offset = 0;
                for (p, &c) in parts.iter().zip(chunk) {
                    let mut d = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        d.extend_from_slice(&gd[o * row + offset..o * row + offset + c]);
                    }
                    offset += c;
                    out.push((*p, like(*p, d)?));
                }
            }
            Op::Reshape { x } => {
                out.push((*x, gout.clone().reshaped(self.shape(*x))?));
            }
            Op::RepeatBatch { x, times } => {
                let n = self.value(*x).numel();
                let mut dx = vec![T::zero(); n];
                for t in 0..*times {
                    add_into(&mut dx, &gd[t * n..(t + 1) * n]);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                inner,
            } => {
                let (c_n, inner) = (*channels, *inner);
                let batch = self.shape(*x)[0];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c_n];
                let mut dbeta = vec![T::zero(); c_n];
                let mut dx = vec![T::zero(); gd.len()];
                for c in 0..c_n {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..batch {
                        let off = (b * c_n + c) * inner;
                        for i in off..off + inner {
                            sum_g += gd[i];
                            sum_gx += gd[i] * xhat[i];
                        }
                    }
                    dgamma[c] = sum_gx;
                    dbeta[c] = sum_g;
                    if *train {
                        // dx = γ·inv_std/n · (n·g − Σg − x̂·Σ(g·x̂))
                        let cnt = T::from_usize(batch * inner);
                        let k = gam[c] * inv_std[c] / cnt;
                        for b in 0..batch {
                            let off = (b * c_n + c) * inner;
                            for i in off..off + inner {
                                dx[i] = k * (cnt * gd[i] - sum_g - xhat[i] * sum_gx);
                            }
                        }
                    } else {
                        let k = gam[c] * inv_std[c];
                        for b in 0..batch {
                            let off = (b * c_n + c) * inner;
                            for i in off..off + inner {
                                dx[i] = k * gd[i];
                            }
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
                out.push((*gamma, like(*gamma, dgamma)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::Resize { x, planes, from, to } => {
                let dx = resize_planes_backward(gd, *planes, *from, *to);
                out.push((*x, like(*x, dx)?));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                classes,
                inner,
                count,
            } => {
                let mut dx = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = gd[0] / T::from_usize(*count);
                    let batch = labels.len() / inner;
                    for b in 0..batch {
                        for i in 0..*inner {
                            let l = labels[b * inner + i];
                            if l == *ignore {
                                continue;
                            }
                            for c in 0..*classes {
                                let idx = (b * classes + c) * inner + i;
                                let target = if c == l as usize { T::one() } else { T::zero() };
                                dx[idx] = (probs[idx] - target) * scale;
                            }
                        }
                    }
                }
                out.push((*logits, like(*logits, dx)?));
            }
            Op::Bce {
                p,
                target,
                omega,
                clamped,
            } => {
                let pd = self.value(*p).data();
                let n = T::from_usize(pd.len().max(1));
                let one = T::one();
                let scale = gd[0] * *omega / n;
                let dp: Vec<T> = pd
                    .iter()
                    .zip(target)
                    .zip(clamped)
                    .map(|((&pv, &t), &c)| {
                        if c {
                            T::zero()
                        } else {
                            -scale * (t / pv - (one - t) / (one - pv))
                        }
                    })
                    .collect();
                out.push((*p, like(*p, dp)?));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).numel().max(1));
                out.push((*x, Tensor::full(self.shape(*x), gd[0] / n)));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(gout, &vals);
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom op '{}' returned {} grads for {} inputs",
                        node.name,
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, g) in inputs.iter().zip(grads) {
                    if g.shape() != self.shape(*v) {
                        return Err(TensorError::shape(node.name, g.shape(), self.shape(*v)));
                    }
                    out.push((*v, g));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// Shapes and strides for a (possibly batched, possibly transposed) product.
struct MatPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    sa: (usize, usize),
    sb: (usize, usize),
    a_batch_stride: usize,
    b_batch_stride: usize,
    out_shape: Vec<usize>,
}

impl MatPlan {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<Self> {
        let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match s.len() {
                2 => Some((1, s[0], s[1])),
                3 => Some((s[0], s[1], s[2])),
                _ => None,
            }
        };
        let (ba, ar, ac) = split(a)?;
        let (bb, br, bc) = split(b)?;
        let batch = if ba == bb || bb == 1 {
            ba
        } else if ba == 1 {
            bb
        } else {
            return None;
        };
        let (m, ka, sa) = if ta { (ac, ar, (1, ac)) } else { (ar, ac, (ac, 1)) };
        let (kb, n, sb) = if tb { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
        if ka != kb {
            return None;
        }
        let a_numel = ar * ac;
        let b_numel = br * bc;
        let out_shape = if a.len() == 3 || b.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Some(Self {
            batch,
            m,
            k: ka,
            n,
            sa,
            sb,
            a_batch_stride: if ba == 1 { 0 } else { a_numel },
            b_batch_stride: if bb == 1 { 0 } else { b_numel },
            out_shape,
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        bi * self.a_batch_stride
    }

    fn b_off(&self, bi: usize) -> usize {
        bi * self.b_batch_stride
    }
}
