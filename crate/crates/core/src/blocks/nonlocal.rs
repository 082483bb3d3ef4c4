//! Pixel-to-pixel non-local attention, kept as a cost and behaviour baseline.

use rand::Rng;

use super::params::{Conv, Ctx, Init, ParamStore};
use crate::error::TensorError;
use crate::tensor::{Scalar, Var};

pub const DEFAULT_PIXEL_CAP: usize = 128 * 128;

#[derive(Clone, Debug)]
pub struct NonLocal {
    pub reduction: usize,
    pub theta: Conv,
    pub phi: Conv,
    pub value: Conv,
    pub out: Conv,
    /// Largest accepted `H * W`; the affinity matrix is `(HW)²`.
    pub pixel_cap: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NonLocalOut {
    pub y: Var,
    /// `[B, HW, HW]`.
    pub affinity: Var,
}

impl NonLocal {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self, TensorError> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(TensorError::config(
                "nonlocal",
                format!("channels {channels} not divisible by reduction ratio {reduction}"),
            ));
        }
        let inner = channels / reduction;
        Ok(Self {
            reduction,
            theta: Conv::new(store, init, &format!("{name}.theta"), channels, inner, 1, 1, true),
            phi: Conv::new(store, init, &format!("{name}.phi"), channels, inner, 1, 1, true),
            value: Conv::new(store, init, &format!("{name}.g"), channels, inner, 1, 1, true),
            out: Conv::new(store, init, &format!("{name}.out"), inner, channels, 1, 1, true),
            pixel_cap: DEFAULT_PIXEL_CAP,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<NonLocalOut, TensorError> {
        let [b, c, h, w]: [usize; 4] = cx
            .g
            .shape(x)
            .try_into()
            .map_err(|_| TensorError::shape("nonlocal", cx.g.shape(x), &[]))?;
        if h * w > self.pixel_cap {
            return Err(TensorError::config(
                "nonlocal",
                format!("{h}x{w} = {} pixels exceeds the cap of {}", h * w, self.pixel_cap),
            ));
        }
        let inner = c / self.reduction;
        let hw = h * w;
        let q = self.theta.forward(cx, x)?;
        let q = cx.g.reshape(q, &[b, inner, hw])?;
        T::stage("theta");
        let k = self.phi.forward(cx, x)?;
        let k = cx.g.reshape(k, &[b, inner, hw])?;
        T::stage("phi");
        let v = self.value.forward(cx, x)?;
        let v = cx.g.reshape(v, &[b, inner, hw])?;
        T::stage("g");
        let scores = cx.g.matmul_t(q, k, true, false)?;
        T::stage("affinity");
        let affinity = cx.g.softmax(scores, 2)?;
        T::stage("softmax");
        let agg = cx.g.matmul_t(v, affinity, false, true)?;
        let agg = cx.g.reshape(agg, &[b, inner, h, w])?;
        T::stage("aggregation");
        let proj = self.out.forward(cx, agg)?;
        T::stage("out");
        let y = cx.g.add(x, proj)?;
        T::stage("residual");
        Ok(NonLocalOut { y, affinity })
    }
}
