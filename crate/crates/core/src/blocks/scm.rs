//! Spatial context module: pixel-to-category attention against the class
//! feature matrix.

use rand::Rng;

use super::params::{Conv, ConvBnRelu, Ctx, Init, ParamStore};
use crate::error::TensorError;
use crate::tensor::{Scalar, Var};

pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Clone, Debug)]
pub struct Scm {
    pub reduction: usize,
    /// Pixel query projection, applied to the gated features.
    pub proj_b: Conv,
    /// Category key projection, applied to the class feature matrix.
    pub proj_c: Conv,
    /// Category value projection, applied to the class feature matrix.
    pub proj_d: Conv,
    pub rho: ConvBnRelu,
}

#[derive(Clone, Copy, Debug)]
pub struct ScmOut {
    /// `[B, C, H, W]`.
    pub x_s: Var,
    /// Row-stochastic pixel-to-category affinity `[B, HW, N]`.
    pub affinity: Var,
}

impl Scm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self, TensorError> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(TensorError::config(
                "scm",
                format!("channels {channels} not divisible by reduction ratio {reduction}"),
            ));
        }
        let inner = channels / reduction;
        Ok(Self {
            reduction,
            proj_b: Conv::new(store, init, &format!("{name}.proj_b"), channels, inner, 1, 1, true),
            proj_c: Conv::new(store, init, &format!("{name}.proj_c"), channels, inner, 1, 1, true),
            proj_d: Conv::new(store, init, &format!("{name}.proj_d"), channels, inner, 1, 1, true),
            rho: ConvBnRelu::new(store, init, &format!("{name}.rho"), inner, channels, 1, 1),
        })
    }

    /// `x_c[B, C, H, W]`, `m[B, C, N]` → spatial context features.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x_c: Var, m: Var) -> Result<ScmOut, TensorError> {
        let [b, c, h, w]: [usize; 4] = cx
            .g
            .shape(x_c)
            .try_into()
            .map_err(|_| TensorError::shape("scm", cx.g.shape(x_c), cx.g.shape(m)))?;
        let ms = cx.g.shape(m).to_vec();
        if ms.len() != 3 || ms[0] != b || ms[1] != c {
            return Err(TensorError::shape("scm", &[b, c, h, w], &ms));
        }
        let n = ms[2];
        let inner = c / self.reduction;

        // `T::stage` marks sub-op boundaries for instrumented cost counting
        let q = self.proj_b.forward(cx, x_c)?;
        let q = cx.g.reshape(q, &[b, inner, h * w])?;
        T::stage("proj_b");
        let m4 = cx.g.reshape(m, &[b, c, n, 1])?;
        let keys = self.proj_c.forward(cx, m4)?;
        let keys = cx.g.reshape(keys, &[b, inner, n])?;
        T::stage("proj_c");
        let values = self.proj_d.forward(cx, m4)?;
        let values = cx.g.reshape(values, &[b, inner, n])?;
        T::stage("proj_d");

        let scores = cx.g.matmul_t(q, keys, true, false)?;
        T::stage("affinity");
        let affinity = cx.g.softmax(scores, 2)?;
        T::stage("softmax");
        let attended = cx.g.matmul_t(values, affinity, false, true)?;
        let attended = cx.g.reshape(attended, &[b, inner, h, w])?;
        T::stage("aggregation");
        let x_s = self.rho.forward(cx, attended)?;
        T::stage("rho");
        Ok(ScmOut { x_s, affinity })
    }
}
