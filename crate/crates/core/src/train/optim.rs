//! SGD with momentum and the poly learning-rate schedule.

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `base * (1 - iter / total)^power`. Iterations past `total` clamp to 0.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> f64 {
    if iter > total {
        log::warn!("poly_lr: iteration {iter} past the schedule end {total}; using 0");
        return 0.0;
    }
    if total == 0 {
        return 0.0;
    }
    base * (1.0 - iter as f64 / total as f64).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.01,
            total_iters: 2000,
            power: 0.9,
        }
    }
}

/// Optimiser settings plus one velocity buffer per trainable tensor.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub cfg: OptimConfig,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    /// Zero velocities shaped like `shapes`.
    pub fn new<'a>(cfg: OptimConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            cfg,
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }

    pub fn for_store(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        Self::new(cfg, store.params().map(|(_, _, t)| t.shape()))
    }

    pub fn lr(&self, iter: usize) -> f64 {
        poly_lr(iter, self.cfg.total_iters, self.cfg.base_lr, self.cfg.power)
    }
}

/// One momentum step over named parameters in a fixed order:
/// `g' = g + wd·p`, `v ← m·v + g'`, `p ← p − lr·v`.
///
/// A missing gradient counts as zero. Every gradient is checked before anything
/// is modified, so a non-finite gradient leaves parameters and velocities intact.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::config(format!(
            "sgd_step: {} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (((name, p), g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != v.shape() || g.is_some_and(|g| g.shape() != p.shape()) {
            return Err(Error::config(format!(
                "sgd_step: shape mismatch for {name}: param {:?}, velocity {:?}, grad {:?}",
                p.shape(),
                v.shape(),
                g.map(|g| g.shape())
            )));
        }
        if g.is_some_and(|g| !g.all_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}; step aborted")));
        }
    }
    let OptimConfig {
        momentum, weight_decay, ..
    } = state.cfg;
    for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let pd = p.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let grad = g.map_or(0.0, |g| g.data()[i].to_f64());
            let gp = grad + weight_decay * pd[i].to_f64();
            let vi = momentum * vd[i].to_f64() + gp;
            vd[i] = T::from_f64(vi);
            if lr != 0.0 {
                pd[i] = T::from_f64(pd[i].to_f64() - lr * vd[i].to_f64());
            }
        }
    }
    Ok(())
}
