//! Losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::blocks::NetOutput;
use crate::error::TensorError;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const IGNORE_LABEL: u8 = 255;
/// Probability clamp used by [`cp_loss`].
pub const CP_EPS: f64 = 1e-7;

/// Weights of the auxiliary and class-probability terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(TensorError::config(
                "loss weights",
                format!("alpha={} beta={} must be non-negative", self.alpha, self.beta),
            ));
        }
        Ok(())
    }

    /// `l + alpha * l_au + beta * l_cp` on plain numbers.
    pub fn combine(&self, l: f64, l_au: f64, l_cp: f64) -> f64 {
        l + self.alpha * l_au + self.beta * l_cp
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub loss: Var,
    pub labelled: usize,
    /// Every pixel was ignored; the loss is exactly 0.
    pub all_ignored: bool,
}

/// Mean per-pixel cross-entropy of `logits[B, N, H, W]` against `mask`
/// (`B * H * W` labels), skipping `ignore`.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &[u8], ignore: u8) -> Result<SegLoss, TensorError> {
    let (loss, labelled) = g.cross_entropy(logits, mask, ignore)?;
    if labelled == 0 {
        log::warn!("segmentation loss: every pixel carries the ignore label");
    }
    Ok(SegLoss {
        loss,
        labelled,
        all_ignored: labelled == 0,
    })
}

/// Per-category pixel frequencies of a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetClassProb {
    pub p: Vec<f64>,
    /// No non-ignored pixel; `p` is all zeros.
    pub empty: bool,
}

pub fn target_class_probability(mask: &[u8], classes: usize, ignore: u8) -> Result<TargetClassProb, TensorError> {
    let mut counts = vec![0u64; classes];
    for &l in mask {
        if l == ignore {
            continue;
        }
        let slot = counts.get_mut(l as usize).ok_or_else(|| {
            TensorError::config("target_class_probability", format!("label {l} outside [0, {classes})"))
        })?;
        *slot += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        log::warn!("class probability target: mask has no labelled pixel");
        return Ok(TargetClassProb {
            p: vec![0.0; classes],
            empty: true,
        });
    }
    Ok(TargetClassProb {
        p: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        empty: false,
    })
}

/// Stacks per-image targets of a `[B, H*W]` label batch into `[B, N]`.
pub fn target_batch<T: Scalar>(masks: &[u8], batch: usize, classes: usize, ignore: u8) -> Result<Tensor<T>, TensorError> {
    if batch == 0 || !masks.len().is_multiple_of(batch) {
        return Err(TensorError::shape("target_batch", &[masks.len()], &[batch]));
    }
    let per = masks.len() / batch;
    let mut data = Vec::with_capacity(batch * classes);
    for m in masks.chunks(per) {
        data.extend(target_class_probability(m, classes, ignore)?.p.into_iter().map(T::from_f64));
    }
    Tensor::new(vec![batch, classes], data)
}

/// Mean over entries of `-omega [t ln p + (1 - t) ln(1 - p)]`, `p` clamped to
/// `[CP_EPS, 1 - CP_EPS]`.
pub fn cp_loss<T: Scalar>(g: &mut Graph<T>, p_p: Var, p_gt: &Tensor<T>, omega: f64) -> Result<Var, TensorError> {
    let (loss, clamped) = g.bce(p_p, p_gt, omega, CP_EPS)?;
    if clamped > 0 {
        log::debug!("class probability loss: {clamped} probabilities clamped to [{CP_EPS}, 1 - {CP_EPS}]");
    }
    Ok(loss)
}

/// `l + alpha * l_au + beta * l_cp` as a graph node.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l: Var,
    l_au: Var,
    l_cp: Option<Var>,
    w: LossWeights,
) -> Result<Var, TensorError> {
    let aux = g.scale(l_au, w.alpha)?;
    let mut total = g.add(l, aux)?;
    if let Some(l_cp) = l_cp {
        let cp = g.scale(l_cp, w.beta)?;
        total = g.add(total, cp)?;
    }
    Ok(total)
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l: Var,
    pub l_au: Var,
    pub l_cp: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Batch weight of the class-probability loss.
    pub omega: f64,
    pub ignore: u8,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            omega: 1.0,
            ignore: IGNORE_LABEL,
        }
    }
}

/// Full training objective for a network output and a `[B, H, W]` label batch.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    out: &NetOutput<T>,
    masks: &[u8],
    cfg: &ObjectiveConfig,
) -> Result<LossTerms, TensorError> {
    let l = seg_loss(g, out.main, masks, cfg.ignore)?.loss;
    let l_au = seg_loss(g, out.aux, masks, cfg.ignore)?.loss;
    let l_cp = match out.p_p {
        Some(p_p) => {
            let [b, n]: [usize; 2] = g.shape(p_p).try_into().expect("p_p is [B, N]");
            let target = target_batch(masks, b, n, cfg.ignore)?;
            Some(cp_loss(g, p_p, &target, cfg.omega)?)
        }
        None => None,
    };
    let total = total_loss(g, l, l_au, l_cp, cfg.weights)?;
    Ok(LossTerms { total, l, l_au, l_cp })
}

/// Pixel counts by (ground truth, prediction).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub miou: f64,
    pub pix_acc: f64,
    /// Per-class IoU; `None` for classes absent from both ground truth and prediction.
    pub iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one label map; `ignore` pixels in `gt` are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8], ignore: u8) -> Result<(), TensorError> {
        if gt.len() != pred.len() {
            return Err(TensorError::shape("confusion matrix", &[gt.len()], &[pred.len()]));
        }
        for (&t, &p) in gt.iter().zip(pred) {
            if t == ignore {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(TensorError::config(
                    "confusion matrix",
                    format!("label pair ({t}, {p}) outside [0, {})", self.classes),
                ));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.classes;
        let mut iou = Vec::with_capacity(n);
        let mut diag = 0u64;
        for c in 0..n {
            let tp = self.get(c, c);
            diag += tp;
            let gt: u64 = (0..n).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..n).map(|t| self.get(t, c)).sum();
            let union = gt + pred - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = self.total();
        let pix_acc = if total == 0 { 0.0 } else { diag as f64 / total as f64 };
        Metrics { miou, pix_acc, iou }
    }
}

/// Per-pixel argmax over the class axis of `scores[N, H, W]`; ties resolve to
/// the lowest class index.
pub fn argmax_classes<T: Scalar>(scores: &[T], classes: usize, pixels: usize) -> Vec<u8> {
    (0..pixels)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if scores[c * pixels + i] > scores[best * pixels + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
