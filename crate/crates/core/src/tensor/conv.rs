//! im2col-based 2-D convolution over `[B, C, H, W]` batches.

use super::Scalar;
use crate::error::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// Zero padding before the first row/column.
    pub pad: usize,
    /// Zero padding after the last row/column.
    pub pad_hi: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        Self::with_padding(x_shape, w_shape, stride, (pad, pad))
    }

    /// Geometry with possibly different padding before and after each axis.
    pub fn with_padding(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        (pad, pad_hi): (usize, usize),
    ) -> Result<Self, TensorError> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::shape("conv2d", x_shape, w_shape));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin || kh != kw {
            return Err(TensorError::shape("conv2d", x_shape, w_shape));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(TensorError::config("conv2d", format!("kernel size {k} is even")));
        }
        if stride == 0 {
            return Err(TensorError::config("conv2d", "stride must be positive"));
        }
        let span_h = (h + pad + pad_hi)
            .checked_sub(k)
            .ok_or_else(|| TensorError::config("conv2d", "kernel larger than padded input"))?;
        let span_w = (w + pad + pad_hi)
            .checked_sub(k)
            .ok_or_else(|| TensorError::config("conv2d", "kernel larger than padded input"))?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(TensorError::config(
                "conv2d",
                format!(
                    "output size is not integral for input {h}x{w}, kernel {k}, stride {stride}, pad ({pad}, {pad_hi})"
                ),
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            pad_hi,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && self.pad_hi == 0
    }
}

/// Unfolds `x` into a `[patch, batch * out_pixels]` matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let mut cols = vec![T::zero(); g.patch() * cols_n];
    if g.is_pointwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * p..(b * g.cin + c + 1) * p];
                cols[c * cols_n + b * p..c * cols_n + (b + 1) * p].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = &mut dst_row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[patch, batch * out_pixels]` back onto `x`.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane =
                        &mut x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the output `[B, Cout, OH, OW]` data and the unfolded input.
pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, x);
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let kk = g.patch();
    let mut tmp = vec![T::zero(); g.cout * cols_n];
    T::gemm(g.cout, kk, cols_n, w, (kk, 1), &cols, (cols_n, 1), &mut tmp, (cols_n, 1), false);
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    for co in 0..g.cout {
        let bv = bias.map(|b| b[co]);
        for b in 0..g.batch {
            let src = &tmp[co * cols_n + b * p..co * cols_n + (b + 1) * p];
            let dst = &mut out[(b * g.cout + co) * p..(b * g.cout + co + 1) * p];
            match bv {
                Some(bv) => {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(g: &ConvGeom, cols: &[T], w: &[T], dy: &[T]) -> ConvGrads<T> {
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let kk = g.patch();
    let mut dtmp = vec![T::zero(); g.cout * cols_n];
    let mut db = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        for b in 0..g.batch {
            let src = &dy[(b * g.cout + co) * p..(b * g.cout + co + 1) * p];
            dtmp[co * cols_n + b * p..co * cols_n + (b + 1) * p].copy_from_slice(src);
            for &v in src {
                db[co] += v;
            }
        }
    }
    let mut dw = vec![T::zero(); g.cout * kk];
    T::gemm(g.cout, cols_n, kk, &dtmp, (cols_n, 1), cols, (1, cols_n), &mut dw, (kk, 1), false);
    let mut dcols = vec![T::zero(); kk * cols_n];
    T::gemm(kk, g.cout, cols_n, w, (1, kk), &dtmp, (cols_n, 1), &mut dcols, (cols_n, 1), false);
    let dx = col2im(g, &dcols);
    ConvGrads { dx, dw, db }
}
