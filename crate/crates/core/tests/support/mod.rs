//! Brute-force reference implementations shared by the integration tests.
//! Every oracle loops over the definition directly and reads parameters out
//! of the store; none of them call into the graph.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ctnet::blocks::{Conv, Mce, NonLocal, ParamStore, Scm};
use ctnet::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_t<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

pub fn vals<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    scores.iter().map(|s| (s - mx).exp() / z).collect()
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [bs, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bs * cout * oh * ow];
    for n in 0..bs {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn conv1d_oracle(x: &[f64], w: &[f64], b: f64) -> Vec<f64> {
    let half = (w.len() / 2) as isize;
    (0..x.len())
        .map(|i| {
            let mut acc = b;
            for (j, wj) in w.iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < x.len() {
                    acc += wj * x[src as usize];
                }
            }
            acc
        })
        .collect()
}

/// Channel gate `[B, C]`: average pool, one same-padded 1-D convolution per
/// kernel, weighted fusion, sigmoid.
pub fn mce_oracle(store: &ParamStore<f64>, mce: &Mce, x: &Tensor<f64>) -> Vec<f64> {
    let [b, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let fuse_w = store.get(mce.fuse_w).data();
    let fuse_b = store.get(mce.fuse_b).data();
    let mut out = Vec::with_capacity(b * c);
    for bi in 0..b {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let branches: Vec<Vec<f64>> = mce
            .conv_w
            .iter()
            .zip(&mce.conv_b)
            .map(|(&wid, &bid)| conv1d_oracle(&pooled, store.get(wid).data(), store.get(bid).item()))
            .collect();
        for ch in 0..c {
            let z = fuse_b[ch] + branches.iter().zip(fuse_w).map(|(br, fw)| br[ch] * fw).sum::<f64>();
            out.push(sigmoid(z));
        }
    }
    out
}

/// Per-pixel loop over the pixel-to-category attention followed by the
/// eval-mode conv-norm-relu output. Returns `(x_s, affinity)`.
pub fn scm_oracle<T: Scalar>(store: &ParamStore<T>, scm: &Scm, x: &Tensor<T>, m: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let n = m.shape()[2];
    let ci = c / scm.reduction;
    let hw = h * w;
    let p = |id| vals(store.get(id));
    let (wb, bb) = (p(scm.proj_b.weight), p(scm.proj_b.bias.unwrap()));
    let (wc, bc) = (p(scm.proj_c.weight), p(scm.proj_c.bias.unwrap()));
    let (wd, bd) = (p(scm.proj_d.weight), p(scm.proj_d.bias.unwrap()));
    let wr = p(scm.rho.conv.weight);
    let (mean, var) = (p(scm.rho.norm.running_mean), p(scm.rho.norm.running_var));
    let (gamma, beta) = (p(scm.rho.norm.gamma), p(scm.rho.norm.beta));
    let (xv, mv) = (vals(x), vals(m));
    let mut out = vec![0.0; b * c * hw];
    let mut aff = vec![0.0; b * hw * n];
    for bi in 0..b {
        let xs = |ch: usize, i: usize| xv[(bi * c + ch) * hw + i];
        let ms = |ch: usize, j: usize| mv[(bi * c + ch) * n + j];
        let key = |q: usize, j: usize| bc[q] + (0..c).map(|ch| wc[q * c + ch] * ms(ch, j)).sum::<f64>();
        let val = |q: usize, j: usize| bd[q] + (0..c).map(|ch| wd[q * c + ch] * ms(ch, j)).sum::<f64>();
        for i in 0..hw {
            let query: Vec<f64> = (0..ci).map(|q| bb[q] + (0..c).map(|ch| wb[q * c + ch] * xs(ch, i)).sum::<f64>()).collect();
            let scores: Vec<f64> = (0..n).map(|j| (0..ci).map(|q| query[q] * key(q, j)).sum()).collect();
            let e = softmax(&scores);
            aff[(bi * hw + i) * n..(bi * hw + i + 1) * n].copy_from_slice(&e);
            let att: Vec<f64> = (0..ci).map(|q| (0..n).map(|j| e[j] * val(q, j)).sum()).collect();
            for ch in 0..c {
                let zc: f64 = (0..ci).map(|q| wr[ch * ci + q] * att[q]).sum();
                let y = (zc - mean[ch]) / (var[ch] + 1e-5).sqrt() * gamma[ch] + beta[ch];
                out[(bi * c + ch) * hw + i] = y.max(0.0);
            }
        }
    }
    (out, aff)
}

/// Pixel-to-pixel attention with a residual connection. Returns `(y, affinity)`.
pub fn nonlocal_oracle<T: Scalar>(store: &ParamStore<T>, nl: &NonLocal, x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let xv = vals(x);
    let hw = h * w;
    let ci = c / nl.reduction;
    let p = |id| vals(store.get(id));
    let (wo, bo) = (p(nl.out.weight), p(nl.out.bias.unwrap()));
    let mut y = vec![0.0; b * c * hw];
    let mut aff = vec![0.0; b * hw * hw];
    for bi in 0..b {
        let xs = |ch: usize, i: usize| xv[(bi * c + ch) * hw + i];
        let proj = |conv: &Conv| -> Vec<Vec<f64>> {
            let (wt, bs) = (p(conv.weight), p(conv.bias.unwrap()));
            (0..hw)
                .map(|i| (0..ci).map(|q| bs[q] + (0..c).map(|ch| wt[q * c + ch] * xs(ch, i)).sum::<f64>()).collect())
                .collect()
        };
        let (theta, phi, g) = (proj(&nl.theta), proj(&nl.phi), proj(&nl.value));
        for i in 0..hw {
            let scores: Vec<f64> = (0..hw).map(|j| (0..ci).map(|q| theta[i][q] * phi[j][q]).sum()).collect();
            let e = softmax(&scores);
            aff[(bi * hw + i) * hw..(bi * hw + i + 1) * hw].copy_from_slice(&e);
            let agg: Vec<f64> = (0..ci).map(|q| (0..hw).map(|j| e[j] * g[j][q]).sum()).collect();
            for ch in 0..c {
                y[(bi * c + ch) * hw + i] = xs(ch, i) + bo[ch] + (0..ci).map(|q| wo[ch * ci + q] * agg[q]).sum::<f64>();
            }
        }
    }
    (y, aff)
}

/// Mean negative log-softmax over labelled pixels of `[B, N, H, W]` logits.
pub fn seg_loss_oracle(logits: &Tensor<f64>, mask: &[u8], ignore: u8) -> f64 {
    let [b, n, h, w]: [usize; 4] = logits.shape().try_into().unwrap();
    let hw = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for bi in 0..b {
        for i in 0..hw {
            let l = mask[bi * hw + i];
            if l == ignore {
                continue;
            }
            let z: Vec<f64> = (0..n).map(|c| logits.data()[(bi * n + c) * hw + i]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total -= (z[l as usize].exp() / denom).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Weighted binary cross-entropy averaged over entries (no clamping).
pub fn cp_loss_oracle(p: &[f64], t: &[f64], omega: f64) -> f64 {
    p.iter()
        .zip(t)
        .map(|(p, t)| -omega * (t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / p.len() as f64
}

pub struct MetricsOracle {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pix_acc: f64,
}

/// IoU by explicit set intersection and union over pixel indices.
pub fn metrics_oracle(gt: &[u8], pred: &[u8], classes: usize, ignore: u8) -> MetricsOracle {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore).collect();
    let iou: Vec<Option<f64>> = (0..classes as u8)
        .map(|c| {
            let a: BTreeSet<usize> = idx.iter().copied().filter(|&i| gt[i] == c).collect();
            let b: BTreeSet<usize> = idx.iter().copied().filter(|&i| pred[i] == c).collect();
            let union = a.union(&b).count();
            (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let correct = idx.iter().filter(|&&i| gt[i] == pred[i]).count();
    MetricsOracle {
        miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        pix_acc: if idx.is_empty() { 0.0 } else { correct as f64 / idx.len() as f64 },
        iou,
    }
}
