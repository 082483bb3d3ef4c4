//! Procedural scenes of coloured shapes, with confusable category pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    /// Whether the pixel centre `(px + 0.5, py + 0.5)`, relative to the top-left
    /// corner of a `w × h` bounding box, lies inside the shape.
    pub fn contains(self, px: usize, py: usize, w: usize, h: usize) -> bool {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let (w, h) = (w as f64, h as f64);
        match self {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let dx = (x - w / 2.0) / (w / 2.0);
                let dy = (y - h / 2.0) / (h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            // apex at top centre, base along the bottom edge
            ShapeKind::Triangle => (x - w / 2.0).abs() <= w / 2.0 * (y / h),
        }
    }
}

/// Parameters of the scene distribution. Class 0 is the background; classes
/// `1..classes` are shape categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Base RGB colour per class, in `[0, 1]`.
    pub palette: Vec<[f64; 3]>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Bounding-box side range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-shape uniform colour offset amplitude, per channel.
    pub jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    /// Category pairs drawn from the same base colour.
    pub confusable: Vec<(usize, usize)>,
    pub seed: u64,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.25, 0.25, 0.25],
    [0.85, 0.30, 0.25],
    [0.25, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.25, 0.80, 0.80],
    [0.95, 0.60, 0.20],
];

impl SceneSpec {
    /// Defaults: 1–2 shapes of side 24–48 px (clipped to the canvas).
    pub fn new(classes: usize, width: usize, height: usize, seed: u64) -> Self {
        let side = width.min(height).max(1);
        Self {
            width,
            height,
            classes,
            palette: (0..classes).map(|c| PALETTE[c % PALETTE.len()]).collect(),
            min_shapes: 1,
            max_shapes: 2,
            min_size: 24.min(side),
            max_size: 48.min(side),
            jitter: 0.08,
            noise: 0.05,
            confusable: if classes >= 3 { vec![(1, 2)] } else { vec![] },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let err = |msg: String| Err(TensorError::config("scene spec", msg));
        if self.classes < 2 {
            return err(format!("need at least 2 classes (background + 1), got {}", self.classes));
        }
        if self.classes > 255 {
            return err(format!("at most 255 classes fit a mask byte, got {}", self.classes));
        }
        if self.palette.len() != self.classes {
            return err(format!("palette has {} colours for {} classes", self.palette.len(), self.classes));
        }
        if self.width == 0 || self.height == 0 {
            return err("canvas must be non-empty".into());
        }
        if self.min_shapes > self.max_shapes {
            return err(format!("shape count range {}..={} is empty", self.min_shapes, self.max_shapes));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return err(format!(
                "shape size range {}..={} does not fit a {}x{} canvas",
                self.min_size, self.max_size, self.width, self.height
            ));
        }
        for &(a, b) in &self.confusable {
            if a == 0 || b == 0 || a >= self.classes || b >= self.classes || a == b {
                return err(format!("confusable pair ({a}, {b}) is not two distinct shape categories"));
            }
        }
        Ok(())
    }

    /// Shape drawn for category `c ≥ 1`.
    pub fn kind_of(&self, c: usize) -> ShapeKind {
        [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Triangle][(c - 1) % 3]
    }

    /// Base colour of a class after applying confusable pairs: the second
    /// member of a pair borrows the first member's colour.
    pub fn base_color(&self, c: usize) -> [f64; 3] {
        for &(a, b) in &self.confusable {
            if c == b {
                return self.palette[a];
            }
        }
        self.palette[c]
    }
}

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H * W` labels.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn jittered(rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> [f64; 3] {
    base.map(|v| v + if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 })
}

/// Deterministic sample `index` of the scene distribution.
pub fn gen_scene(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (w, h) = (spec.width, spec.height);
    let mut color = vec![[0.0f64; 3]; w * h];
    let mut mask = vec![0u8; w * h];

    let bg = jittered(&mut rng, spec.base_color(0), spec.jitter);
    color.fill(bg);
    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..n_shapes {
        let cat = rng.random_range(1..spec.classes);
        let bw = rng.random_range(spec.min_size..=spec.max_size);
        let bh = rng.random_range(spec.min_size..=spec.max_size);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let rgb = jittered(&mut rng, spec.base_color(cat), spec.jitter);
        let kind = spec.kind_of(cat);
        for py in 0..bh {
            for px in 0..bw {
                if kind.contains(px, py, bw, bh) {
                    let i = (y0 + py) * w + x0 + px;
                    color[i] = rgb;
                    mask[i] = cat as u8;
                }
            }
        }
    }

    let mut data = vec![0.0f32; 3 * w * h];
    for (i, rgb) in color.iter().enumerate() {
        for ch in 0..3 {
            let n = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            // quantise so that an image survives an 8-bit round trip unchanged
            let v = ((rgb[ch] + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data[ch * w * h + i] = v as f32;
        }
    }
    Sample {
        image: Tensor::new(vec![3, h, w], data).expect("consistent shape"),
        mask,
    }
}

/// Expected fraction of pixels per class under the scene distribution,
/// computed from the shape distribution without sampling.
///
/// For a pixel `p`, a single shape covers it with category `c` with
/// probability `q_c(p)`, averaging over the box size, position and the exact
/// rasterised fill of each size. With `n` independent shapes drawn in order
/// and later ones on top, `p` ends up labelled `c` with probability
/// `q_c (1 - (1 - q)^n) / q` where `q = Σ q_c`.
pub fn expected_class_frequency(spec: &SceneSpec) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let sizes: Vec<usize> = (spec.min_size..=spec.max_size).collect();
    let p_size = 1.0 / sizes.len() as f64;
    // Probability that a box of side `s` placed uniformly on an axis of length
    // `len` covers coordinate `i`.
    let axis = |len: usize, s: usize| -> Vec<f64> {
        let positions = (len - s + 1) as f64;
        (0..len)
            .map(|i| {
                let lo = i.saturating_sub(s - 1);
                let hi = i.min(len - s);
                if hi < lo {
                    0.0
                } else {
                    (hi - lo + 1) as f64 / positions
                }
            })
            .collect()
    };
    let ax: Vec<Vec<f64>> = sizes.iter().map(|&s| axis(w, s)).collect();
    let ay: Vec<Vec<f64>> = sizes.iter().map(|&s| axis(h, s)).collect();

    // Coverage probability per pixel for each shape kind, given that kind is drawn.
    let kinds = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Triangle];
    let mut cover = vec![vec![0.0f64; w * h]; kinds.len()];
    for (k, kind) in kinds.iter().enumerate() {
        for (i, &sw) in sizes.iter().enumerate() {
            for (j, &sh) in sizes.iter().enumerate() {
                let inside = (0..sh)
                    .flat_map(|py| (0..sw).map(move |px| (px, py)))
                    .filter(|&(px, py)| kind.contains(px, py, sw, sh))
                    .count();
                let fill = inside as f64 / (sw * sh) as f64;
                let wgt = p_size * p_size * fill;
                for y in 0..h {
                    let fy = ay[j][y] * wgt;
                    if fy == 0.0 {
                        continue;
                    }
                    for x in 0..w {
                        cover[k][y * w + x] += fy * ax[i][x];
                    }
                }
            }
        }
    }

    let cats = spec.classes - 1;
    let counts: Vec<usize> = (spec.min_shapes..=spec.max_shapes).collect();
    let mut freq = vec![0.0f64; spec.classes];
    for pix in 0..w * h {
        let q_c: Vec<f64> = (1..spec.classes)
            .map(|c| {
                let k = kinds.iter().position(|&kk| kk == spec.kind_of(c)).unwrap();
                cover[k][pix] / cats as f64
            })
            .collect();
        let q: f64 = q_c.iter().sum();
        let mut covered = 0.0;
        for &n in &counts {
            let hit = 1.0 - (1.0 - q).powi(n as i32);
            covered += hit / counts.len() as f64;
            if q > 0.0 {
                for (c, &qc) in q_c.iter().enumerate() {
                    freq[c + 1] += qc / q * hit / counts.len() as f64;
                }
            }
        }
        freq[0] += 1.0 - covered;
    }
    let total = (w * h) as f64;
    freq.iter().map(|f| f / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_covers_about_half_its_box() {
        let (w, h) = (40, 40);
        let inside = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| ShapeKind::Triangle.contains(x, y, w, h))
            .count();
        assert!(((inside as f64) / 1600.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn confusable_partner_borrows_colour() {
        let spec = SceneSpec::new(4, 64, 64, 0);
        assert_eq!(spec.base_color(2), spec.base_color(1));
        assert_ne!(spec.base_color(3), spec.base_color(1));
    }
}
