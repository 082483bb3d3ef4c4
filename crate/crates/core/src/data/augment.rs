//! Random flip, scale and rotation about the image centre.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::Sample;
use crate::tensor::Tensor;

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// One set of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            scale: rng.random_range(MIN_SCALE..=MAX_SCALE),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Mirrors image and mask left to right.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let w = s.width();
    let mut mask = s.mask.clone();
    for row in mask.chunks_mut(w) {
        row.reverse();
    }
    Sample {
        image: s.image.flip_last(),
        mask,
    }
}

/// Applies `d` on the same canvas: bilinear sampling for the image (zero
/// outside the source), nearest for the mask (`ignore` outside the source).
pub fn apply(s: &Sample, d: &AugmentDraw, ignore: u8) -> Sample {
    let src = if d.flip { flip_horizontal(s) } else { s.clone() };
    let (h, w) = (src.height(), src.width());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = d.rotation_deg.to_radians().sin_cos();
    let plane = h * w;
    let img = src.image.data();
    let mut out = vec![0.0f32; 3 * plane];
    let mut mask = vec![ignore; plane];
    for y in 0..h {
        for x in 0..w {
            // inverse map of the output pixel centre into source index coordinates
            let u = x as f64 + 0.5 - cx;
            let v = y as f64 + 0.5 - cy;
            let sx = (cos * u + sin * v) / d.scale + cx - 0.5;
            let sy = (-sin * u + cos * v) / d.scale + cy - 0.5;
            let o = y * w + x;

            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                mask[o] = src.mask[ny as usize * w + nx as usize];
            }

            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let fx = sx.clamp(0.0, (w - 1) as f64);
            let fy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..3 {
                let p = |yy: usize, xx: usize| img[ch * plane + yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[ch * plane + o] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, h, w], out).expect("consistent shape"),
        mask,
    }
}
