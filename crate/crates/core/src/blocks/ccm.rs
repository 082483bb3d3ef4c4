//! Channel context module: gates the feature map, predicts per-class presence
//! probabilities, and builds the class feature matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mce::Mce;
use super::params::{Ctx, EntryKind, Init, ParamId, ParamStore};
use crate::error::TensorError;
use crate::tensor::{PoolMode, Scalar, Tensor, Var};

/// Nonlinearity of the class-presence head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassActivation {
    /// Independent per-class probability, matching the binary cross-entropy loss.
    #[default]
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for ClassActivation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "softmax" => Ok(Self::Softmax),
            other => Err(format!("unknown class activation '{other}' (sigmoid|softmax)")),
        }
    }
}

impl std::fmt::Display for ClassActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ccm {
    pub mce: Mce,
    /// `[C, N]`.
    pub cls_w: ParamId,
    /// `[N]`.
    pub cls_b: ParamId,
    pub activation: ClassActivation,
}

/// Outputs of [`Ccm::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CcmOut {
    /// Gated features `[B, C, H, W]`.
    pub x_c: Var,
    /// Channel gate `[B, C]`.
    pub c_m: Var,
    /// Class-presence probabilities `[B, N]`.
    pub p_p: Var,
    /// Class feature matrix `[B, C, N]`, column `j` equal to `p_p[j] * c_m`.
    pub m: Var,
}

impl Ccm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        classes: usize,
        kernels: &[usize],
        pool: PoolMode,
        activation: ClassActivation,
    ) -> Result<Self, TensorError> {
        let mce = Mce::new(store, init, &format!("{name}.mce"), channels, kernels, pool)?;
        let cls_w = store.register(
            format!("{name}.cls.weight"),
            EntryKind::Param,
            init.uniform(&[channels, classes], 1.0 / (channels as f64).sqrt()),
        );
        let cls_b = store.register(format!("{name}.cls.bias"), EntryKind::Param, Tensor::zeros(&[classes]));
        Ok(Self {
            mce,
            cls_w,
            cls_b,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<CcmOut, TensorError> {
        let c_m = self.mce.forward(cx, x)?;
        self.forward_with_gate(cx, x, c_m)
    }

    /// Everything downstream of the gate, for a caller-supplied `c_m[B, C]`.
    pub fn forward_with_gate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, c_m: Var) -> Result<CcmOut, TensorError> {
        let x_c = cx.g.channel_mul(x, c_m)?;
        let p_p = self.class_probabilities(cx, c_m)?;
        let m = class_feature_matrix(cx, c_m, p_p)?;
        Ok(CcmOut { x_c, c_m, p_p, m })
    }

    fn class_probabilities<T: Scalar>(&self, cx: &mut Ctx<'_, T>, c_m: Var) -> Result<Var, TensorError> {
        let logits = cx.g.matmul(c_m, cx.p(self.cls_w))?;
        let logits = cx.g.add_bias(logits, cx.p(self.cls_b), 1)?;
        match self.activation {
            ClassActivation::Sigmoid => cx.g.sigmoid(logits),
            ClassActivation::Softmax => cx.g.softmax(logits, 1),
        }
    }
}

/// Batched outer product `c_m[B, C] ⊗ p_p[B, N]` → `[B, C, N]`.
pub fn class_feature_matrix<T: Scalar>(cx: &mut Ctx<'_, T>, c_m: Var, p_p: Var) -> Result<Var, TensorError> {
    let (b, c) = (cx.g.shape(c_m)[0], cx.g.shape(c_m)[1]);
    let n = cx.g.shape(p_p)[1];
    let col = cx.g.reshape(c_m, &[b, c, 1])?;
    let row = cx.g.reshape(p_p, &[b, 1, n])?;
    cx.g.matmul(col, row)
}
