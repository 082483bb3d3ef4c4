//! Multi-scale local channel excitation: a per-channel gate in (0, 1).

use rand::Rng;

use super::params::{Ctx, EntryKind, Init, ParamId, ParamStore};
use crate::error::TensorError;
use crate::tensor::{PoolMode, Scalar, Tensor, Var};

pub const DEFAULT_KERNELS: [usize; 4] = [9, 17, 33, 65];

/// Kernel size actually used for `channels`: `k` capped at the largest odd
/// value not exceeding `channels`.
pub fn effective_kernel(k: usize, channels: usize) -> usize {
    let cap = if channels % 2 == 1 { channels } else { channels - 1 };
    k.min(cap)
}

#[derive(Clone, Debug)]
pub struct Mce {
    /// Effective (clipped) kernel sizes, one per scale.
    pub kernels: Vec<usize>,
    pub conv_w: Vec<ParamId>,
    pub conv_b: Vec<ParamId>,
    /// `[s, 1]` scale-fusion weights.
    pub fuse_w: ParamId,
    /// `[C]` per-channel bias.
    pub fuse_b: ParamId,
    pub pool: PoolMode,
}

impl Mce {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        kernels: &[usize],
        pool: PoolMode,
    ) -> Result<Self, TensorError> {
        if channels < 3 {
            return Err(TensorError::config(
                "mce",
                format!("needs at least 3 channels, got {channels}"),
            ));
        }
        if kernels.is_empty() {
            return Err(TensorError::config("mce", "kernel size list is empty"));
        }
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return Err(TensorError::config("mce", format!("kernel size {k} is not odd")));
        }
        let effective: Vec<usize> = kernels.iter().map(|&k| effective_kernel(k, channels)).collect();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (i, &k) in effective.iter().enumerate() {
            let bound = 1.0 / (k as f64).sqrt();
            conv_w.push(store.register(format!("{name}.conv{i}.weight"), EntryKind::Param, init.uniform(&[k], bound)));
            conv_b.push(store.register(format!("{name}.conv{i}.bias"), EntryKind::Param, init.uniform(&[1], bound)));
        }
        let s = effective.len();
        let fuse_w = store.register(
            format!("{name}.fuse.weight"),
            EntryKind::Param,
            init.uniform(&[s, 1], 1.0 / (s as f64).sqrt()),
        );
        let fuse_b = store.register(format!("{name}.fuse.bias"), EntryKind::Param, Tensor::zeros(&[channels]));
        Ok(Self {
            kernels: effective,
            conv_w,
            conv_b,
            fuse_w,
            fuse_b,
            pool,
        })
    }

    pub fn scales(&self) -> usize {
        self.kernels.len()
    }

    /// `x[B, C, H, W]` → channel gate `[B, C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let shape = cx.g.shape(x).to_vec();
        let (b, c) = (shape[0], shape[1]);
        let pooled = cx.g.global_pool(x, self.pool)?;
        let mut columns = Vec::with_capacity(self.scales());
        for (w, bias) in self.conv_w.iter().zip(&self.conv_b) {
            let y = cx.g.conv1d_same(pooled, cx.bound.var(*w), cx.bound.var(*bias))?;
            columns.push(cx.g.reshape(y, &[b, c, 1])?);
        }
        let stacked = cx.g.concat(&columns, 2)?;
        let fused = cx.g.matmul(stacked, cx.p(self.fuse_w))?;
        let fused = cx.g.reshape(fused, &[b, c])?;
        let fused = cx.g.add_bias(fused, cx.p(self.fuse_b), 1)?;
        cx.g.sigmoid(fused)
    }
}
