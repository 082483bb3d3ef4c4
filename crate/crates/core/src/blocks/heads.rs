//! Backbone, fusion head and auxiliary head.

use rand::Rng;

use super::params::{Conv, ConvBnRelu, Ctx, Init, ParamStore};
use crate::error::TensorError;
use crate::tensor::{Scalar, Var};

/// Stack of stride-`s` conv–norm–relu stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<ConvBnRelu>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        strides: &[usize],
    ) -> Self {
        let mut cin = in_channels;
        let stages = channels
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&cout, &s))| {
                let st = ConvBnRelu::new(store, init, &format!("{name}.{i}"), cin, cout, 3, s);
                cin = cout;
                st
            })
            .collect();
        Self { stages }
    }

    /// Output of every stage, shallowest first.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>, TensorError> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for st in &self.stages {
            cur = st.forward(cx, cur)?;
            outs.push(cur);
        }
        Ok(outs)
    }
}

/// Joins channel-context features with spatial-context features and
/// classifies every pixel.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub refine: ConvBnRelu,
    /// Absent when there is no spatial branch to fuse.
    pub fuse: Option<ConvBnRelu>,
    pub classifier: Conv,
}

impl FusionHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        classes: usize,
        with_spatial: bool,
    ) -> Self {
        Self {
            refine: ConvBnRelu::new(store, init, &format!("{name}.refine"), channels, channels, 3, 1),
            fuse: with_spatial
                .then(|| ConvBnRelu::new(store, init, &format!("{name}.fuse"), 2 * channels, channels, 1, 1)),
            classifier: Conv::new(store, init, &format!("{name}.cls"), channels, classes, 1, 1, true),
        }
    }

    /// Per-pixel logits `[B, N, H, W]` at feature resolution.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x_c: Var, x_s: Option<Var>) -> Result<Var, TensorError> {
        let f = self.refine.forward(cx, x_c)?;
        let joined = match (&self.fuse, x_s) {
            (Some(fuse), Some(x_s)) => {
                let cat = cx.g.concat(&[f, x_s], 1)?;
                fuse.forward(cx, cat)?
            }
            (None, None) => f,
            _ => {
                return Err(TensorError::Contract(
                    "fusion head: spatial input presence does not match construction".into(),
                ))
            }
        };
        self.classifier.forward(cx, joined)
    }
}

/// Deep-supervision classifier on an intermediate backbone stage.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub conv: ConvBnRelu,
    pub classifier: Conv,
}

impl AuxHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        in_channels: usize,
        classes: usize,
    ) -> Self {
        let hidden = (in_channels / 4).max(4);
        Self {
            conv: ConvBnRelu::new(store, init, &format!("{name}.conv"), in_channels, hidden, 3, 1),
            classifier: Conv::new(store, init, &format!("{name}.cls"), hidden, classes, 1, 1, true),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(cx, x)?;
        self.classifier.forward(cx, y)
    }
}
