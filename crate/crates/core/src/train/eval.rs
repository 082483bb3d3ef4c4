//! Single- and multi-scale evaluation.

use serde::{Deserialize, Serialize};

use crate::blocks::{CtNet, OUTPUT_STRIDE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::{argmax_classes, ConfusionMatrix, Metrics, IGNORE_LABEL};
use crate::tensor::kernels::softmax_strided;
use crate::tensor::{resize_bilinear, Scalar, Tensor};

pub const MULTI_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0],
            flip: false,
        }
    }
}

impl EvalConfig {
    pub fn multi_scale() -> Self {
        Self {
            scales: MULTI_SCALES.to_vec(),
            flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("at least one evaluation scale is required"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("evaluation scale {s} must be positive")));
        }
        Ok(())
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Zero-pads `[B, C, H, W]` on the bottom and right.
fn pad_to<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let [b, c, h, w]: [usize; 4] = x.shape().try_into().expect("rank 4");
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[b, c, ph, pw]);
    let (src, dst) = (x.data(), out.data_mut());
    for plane in 0..b * c {
        for y in 0..h {
            let s = plane * h * w + y * w;
            let d = plane * ph * pw + y * pw;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Keeps the top-left `h × w` window of `[B, C, H, W]`.
fn crop_to<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [b, c, ph, pw]: [usize; 4] = x.shape().try_into().expect("rank 4");
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let src = x.data();
    let mut data = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let s = plane * ph * pw + y * pw;
            data.extend_from_slice(&src[s..s + w]);
        }
    }
    Tensor::new(vec![b, c, h, w], data).expect("consistent shape")
}

/// Class probabilities `[B, N, H, W]` for `images[B, 3, H, W]`, averaged over
/// scales (and mirrored views when `e.flip`). Each view is resized, padded to
/// a multiple of the output stride, run in eval mode, cropped, turned into
/// probabilities and resized back before averaging.
pub fn class_probabilities<T: Scalar>(net: &CtNet<T>, images: &Tensor<T>, e: &EvalConfig) -> Result<Tensor<T>> {
    e.validate()?;
    let [_, _, h, w]: [usize; 4] = images
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("expected [B, 3, H, W] images, got {:?}", images.shape())))?;
    let mut sum: Option<Tensor<T>> = None;
    let mut views = 0usize;
    for &s in &e.scales {
        let sh = ((h as f64 * s).round() as usize).max(1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let (ph, pw) = (round_up(sh, OUTPUT_STRIDE), round_up(sw, OUTPUT_STRIDE));
        if (ph, pw) != (sh, sw) {
            log::info!("scale {s}: {sh}x{sw} padded to {ph}x{pw}");
        }
        let resized = resize_bilinear(images, sh, sw)?;
        let mut inputs = vec![(resized.clone(), false)];
        if e.flip {
            inputs.push((resized.flip_last(), true));
        }
        for (input, flipped) in inputs {
            let logits = net.predict(&pad_to(&input, ph, pw))?.main;
            let logits = crop_to(&logits, sh, sw);
            let [b, n, _, _]: [usize; 4] = logits.shape().try_into().expect("rank 4");
            let probs = Tensor::new(logits.shape().to_vec(), softmax_strided(logits.data(), b, n, sh * sw))?;
            let mut probs = resize_bilinear(&probs, h, w)?;
            if flipped {
                probs = probs.flip_last();
            }
            views += 1;
            sum = Some(match sum {
                None => probs,
                Some(acc) => acc.zip_map(&probs, |a, b| a + b)?,
            });
        }
    }
    let sum = sum.expect("at least one view");
    if views == 1 {
        return Ok(sum);
    }
    let inv = T::from_f64(views as f64);
    Ok(sum.map(|v| v / inv))
}

/// Predicted label maps, one `H·W` vector per image.
pub fn predict_labels<T: Scalar>(net: &CtNet<T>, images: &Tensor<T>, e: &EvalConfig) -> Result<Vec<Vec<u8>>> {
    let probs = class_probabilities(net, images, e)?;
    let [b, n, h, w]: [usize; 4] = probs.shape().try_into().expect("rank 4");
    let plane = n * h * w;
    Ok((0..b)
        .map(|i| argmax_classes(&probs.data()[i * plane..(i + 1) * plane], n, h * w))
        .collect())
}

/// Confusion-matrix metrics of `net` on `data`. The network is not modified.
pub fn evaluate<T: Scalar>(net: &CtNet<T>, data: &Dataset, e: &EvalConfig) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(data.classes);
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.cast()).collect();
        let images = Tensor::stack(&images)?;
        for (s, pred) in chunk.iter().zip(predict_labels(net, &images, e)?) {
            cm.add(&s.mask, &pred, IGNORE_LABEL)?;
        }
    }
    Ok(cm.metrics())
}
