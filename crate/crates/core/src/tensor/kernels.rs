//! Graph-free forward kernels shared by the autodiff ops and by inference code.

use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Plain 2-D matrix product `a[m,k] · b[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, (n, 1), false);
    Tensor::new(vec![m, n], out)
}

/// Cross-correlation of `x[B,Cin,H,W]` with `w[Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(TensorError::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let (out, _) = conv::forward(&g, x.data(), w.data(), b.map(|b| b.data()));
    Tensor::new(g.out_shape(), out)
}

pub(crate) fn check_conv1d(k: usize) -> Result<(), TensorError> {
    if k.is_multiple_of(2) {
        return Err(TensorError::config("conv1d_same", format!("kernel size {k} is even")));
    }
    Ok(())
}

/// Zero-padded, same-length 1-D cross-correlation along the last axis.
pub fn conv1d_same<T: Scalar>(x: &Tensor<T>, w: &[T], b: T) -> Result<Tensor<T>, TensorError> {
    let c = *x.shape().last().unwrap_or(&0);
    check_conv1d(w.len())?;
    let mut out = vec![T::zero(); x.numel()];
    conv1d_rows(x.data(), w, b, c, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn conv1d_rows<T: Scalar>(x: &[T], w: &[T], b: T, c: usize, out: &mut [T]) {
    let half = (w.len() / 2) as isize;
    for (row, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
        for (i, o) in orow.iter_mut().enumerate() {
            let mut acc = b;
            for (j, &wj) in w.iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    acc += wj * row[src as usize];
                }
            }
            *o = acc;
        }
    }
}

/// Numerically stable softmax over `len`-sized groups strided by `inner`.
pub(crate) fn softmax_strided<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = x[base];
            for j in 1..len {
                mx = mx.max_of(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                let idx = base + j * inner;
                out[idx] = out[idx] / sum;
            }
        }
    }
    out
}

/// Softmax along the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let len = *x.shape().last().unwrap_or(&1);
    let outer = x.numel() / len.max(1);
    let data = softmax_strided(x.data(), outer, len, 1);
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Interpolation taps for one axis: source indices `(i0, i1)` and weight of `i1`.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub t: Vec<f64>,
}

/// Half-pixel-centre taps: `s = (d + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub(crate) fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let mut taps = AxisTaps {
        i0: Vec::with_capacity(output),
        i1: Vec::with_capacity(output),
        t: Vec::with_capacity(output),
    };
    let hi = (input - 1) as f64;
    for d in 0..output {
        let s = ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, hi);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        taps.i0.push(i0);
        taps.i1.push(i1);
        taps.t.push(s - i0 as f64);
    }
    taps
}

pub(crate) fn resize_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = (ty.i0[oy], ty.i1[oy]);
            let wy1 = T::from_f64(ty.t[oy]);
            let wy0 = T::from_f64(1.0 - ty.t[oy]);
            for ox in 0..ow {
                let (x0, x1) = (tx.i0[ox], tx.i1[ox]);
                let wx1 = T::from_f64(tx.t[ox]);
                let wx0 = T::from_f64(1.0 - tx.t[ox]);
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub(crate) fn resize_planes_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (ty.i0[oy], ty.i1[oy]);
            let wy1 = T::from_f64(ty.t[oy]);
            let wy0 = T::from_f64(1.0 - ty.t[oy]);
            for ox in 0..ow {
                let (x0, x1) = (tx.i0[ox], tx.i1[ox]);
                let wx1 = T::from_f64(tx.t[ox]);
                let wx0 = T::from_f64(1.0 - tx.t[ox]);
                let g = src[oy * ow + ox];
                let gt = g * wy0;
                let gb = g * wy1;
                dst[y0 * w + x0] += gt * wx0;
                dst[y0 * w + x1] += gt * wx1;
                dst[y1 * w + x0] += gb * wx0;
                dst[y1 * w + x1] += gb * wx1;
            }
        }
    }
    dx
}

/// Bilinear resize of the two trailing axes to `oh × ow`.
pub fn resize_bilinear<T: Scalar>(
    x: &Tensor<T>,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>, TensorError> {
    let r = x.rank();
    if r < 2 || oh == 0 || ow == 0 || x.shape()[r - 1] == 0 || x.shape()[r - 2] == 0 {
        return Err(TensorError::config(
            "resize_bilinear",
            format!("cannot resize shape {:?} to {oh}x{ow}", x.shape()),
        ));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let planes = x.numel() / (h * w);
    let data = resize_planes(x.data(), planes, (h, w), (oh, ow));
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, data)
}
