//! The training loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{checkpoint, CtNet, NetworkConfig};
use crate::data::{self, augment, AugmentDraw, Dataset, Split};
use crate::error::{Error, Result, TensorError};
use crate::objectives::{objective, Metrics, IGNORE_LABEL};
use crate::tensor::{Graph, Tensor};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalConfig};
use super::optim::{sgd_step, OptimState};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const NETWORK_SIDECAR: &str = "network.json";
pub const CONFIG_SIDECAR: &str = "config.txt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// One line of the metrics log. `ts` is the only field that varies between
/// identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub step: usize,
    pub split: Split,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    #[serde(rename = "PixAcc")]
    pub pix_acc: Option<f64>,
    pub loss: Option<f64>,
    pub l: Option<f64>,
    pub l_au: Option<f64>,
    pub l_cp: Option<f64>,
    pub lr: Option<f64>,
    pub ts: f64,
}

/// Loss values of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l: f64,
    pub l_au: f64,
    pub l_cp: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub best_miou: f64,
    pub best_step: usize,
    /// Validation metrics at every evaluation step.
    pub evals: Vec<(usize, Metrics)>,
    pub losses: Vec<StepLosses>,
    /// The network after the last step.
    pub net: CtNet<f32>,
}

fn timestamp() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Draws batches: a fresh permutation per epoch, optional augmentation.
struct Batcher<'a> {
    data: &'a Dataset,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    augment: bool,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a Dataset, seed: u64, augment: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            data,
            rng,
            order: Vec::new(),
            cursor: 0,
            augment,
        }
    }

    fn next(&mut self, size: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
        let mut images = Vec::with_capacity(size);
        let mut masks = Vec::new();
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = &self.data.samples[self.order[self.cursor]];
            self.cursor += 1;
            let s = if self.augment {
                let d = AugmentDraw::sample(&mut self.rng);
                augment(s, &d, IGNORE_LABEL)
            } else {
                s.clone()
            };
            images.push(s.image);
            masks.extend_from_slice(&s.mask);
        }
        Ok((Tensor::stack(&images)?, masks))
    }
}

struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path,
        })
    }

    fn write(&mut self, line: &MetricLine) -> Result<()> {
        let json = serde_json::to_string(line)?;
        writeln!(self.file, "{json}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn write_checkpoint(net: &CtNet<f32>, dir: &Path, name: &str) -> Result<()> {
    // write then rename so an interrupted save never replaces a good file
    let tmp = dir.join(format!("{name}.tmp"));
    checkpoint::save(net.store(), &tmp)?;
    let path = dir.join(name);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Trains on in-memory splits, writing checkpoints, sidecars and the metrics
/// log into `cfg.out`.
pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if train_set.classes != val_set.classes {
        return Err(Error::config(format!(
            "train has {} classes, val has {}",
            train_set.classes, val_set.classes
        )));
    }
    let net_cfg = cfg.network(train_set.classes);
    let mut net = CtNet::<f32>::new(net_cfg.clone())?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_sidecars(cfg, &net_cfg)?;
    let mut log = MetricsLog::create(cfg.out.join(METRICS_LOG))?;
    // a numerical halt before the first evaluation still leaves usable weights
    write_checkpoint(&net, &cfg.out, LAST_CHECKPOINT)?;
    log::info!(
        "training {} ({} parameters) for {} steps on {} images",
        cfg.variant,
        net.param_count(),
        cfg.iters,
        train_set.len()
    );

    let mut state = OptimState::for_store(cfg.optim(), net.store());
    let objective_cfg = cfg.objective();
    let mut batches = Batcher::new(train_set, cfg.seed, cfg.augment);
    let mut report = TrainReport {
        best_miou: f64::NEG_INFINITY,
        best_step: 0,
        evals: Vec::new(),
        losses: Vec::with_capacity(cfg.iters),
        net: net.clone(),
    };
    let mut window: Vec<StepLosses> = Vec::new();

    for step in 1..=cfg.iters {
        let lr = state.lr(step - 1);
        let (images, masks) = batches.next(cfg.batch)?;
        let halt = |e: TensorError| halt_on_non_finite(e.into(), step, &cfg.out);
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let x = g.constant(images);
        let out = net.forward(&mut g, &bound, x, true).map_err(halt)?;
        let terms = objective(&mut g, &out, &masks, &objective_cfg).map_err(halt)?;
        let total = g.value(terms.total).item() as f64;
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {total} at step {step}; last good checkpoint kept in {}",
                cfg.out.display()
            )));
        }
        g.backward(terms.total).map_err(halt)?;
        let ids = net.store().param_ids();
        let grads: Vec<Option<&Tensor<f32>>> = ids.iter().map(|&id| g.grad(bound.var(id))).collect();
        let grads: Vec<Option<Tensor<f32>>> = grads.into_iter().map(|t| t.cloned()).collect();
        let losses = StepLosses {
            total,
            l: g.value(terms.l).item() as f64,
            l_au: g.value(terms.l_au).item() as f64,
            l_cp: terms.l_cp.map(|v| g.value(v).item() as f64),
            lr,
        };
        let updates = out.updates;
        drop(g);
        let grads: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        sgd_step(
            net.store_mut().params_mut().map(|(_, n, t)| (n, t)),
            &grads,
            &mut state,
            lr,
        )
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            other => other,
        })?;
        net.apply_updates(updates);
        report.losses.push(losses);
        window.push(losses);

        if step % cfg.log_every == 0 || step == cfg.iters {
            let mean = |f: &dyn Fn(&StepLosses) -> f64| window.iter().map(f).sum::<f64>() / window.len() as f64;
            let has_cp = window.iter().all(|w| w.l_cp.is_some());
            log.write(&MetricLine {
                step,
                split: Split::Train,
                miou: None,
                pix_acc: None,
                loss: Some(mean(&|w| w.total)),
                l: Some(mean(&|w| w.l)),
                l_au: Some(mean(&|w| w.l_au)),
                l_cp: has_cp.then(|| mean(&|w| w.l_cp.unwrap_or(0.0))),
                lr: Some(lr),
                ts: timestamp(),
            })?;
            window.clear();
        }

        if step % cfg.eval_every == 0 || step == cfg.iters {
            let m = evaluate(&net, val_set, &EvalConfig::default()).map_err(|e| halt_on_non_finite(e, step, &cfg.out))?;
            log::info!("step {step}: val mIoU {:.4} PixAcc {:.4}", m.miou, m.pix_acc);
            log.write(&MetricLine {
                step,
                split: Split::Val,
                miou: Some(m.miou),
                pix_acc: Some(m.pix_acc),
                loss: None,
                l: None,
                l_au: None,
                l_cp: None,
                lr: None,
                ts: timestamp(),
            })?;
            write_checkpoint(&net, &cfg.out, LAST_CHECKPOINT)?;
            if m.miou > report.best_miou {
                report.best_miou = m.miou;
                report.best_step = step;
                write_checkpoint(&net, &cfg.out, BEST_CHECKPOINT)?;
            }
            report.evals.push((step, m));
        }
    }
    report.net = net;
    Ok(report)
}

fn halt_on_non_finite(e: Error, step: usize, out: &Path) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Numerical(format!(
            "non-finite values in {op} at step {step}; last good checkpoint kept in {}",
            out.display()
        )),
        other => other,
    }
}

fn write_sidecars(cfg: &TrainConfig, net_cfg: &NetworkConfig) -> Result<()> {
    let p = cfg.out.join(CONFIG_SIDECAR);
    std::fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    let p = cfg.out.join(NETWORK_SIDECAR);
    let json = serde_json::to_string_pretty(net_cfg)? + "\n";
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Loads both splits from `cfg.data` and trains. Nothing is written when the
/// dataset cannot be read.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if !cfg.data.join(data::dataset::MANIFEST).is_file() {
        return Err(Error::config(format!(
            "no dataset at {} (missing {})",
            cfg.data.display(),
            data::dataset::MANIFEST
        )));
    }
    let train_set = data::load_split(&cfg.data, Split::Train)?;
    let val_set = data::load_split(&cfg.data, Split::Val)?;
    train_on(cfg, &train_set, &val_set)
}

/// Rebuilds a trained network from a checkpoint and the `network.json`
/// written next to it.
pub fn load_model(checkpoint_path: &Path) -> Result<CtNet<f32>> {
    let dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    let sidecar = dir.join(NETWORK_SIDECAR);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let net_cfg: NetworkConfig = serde_json::from_str(&text)?;
    let mut net = CtNet::<f32>::new(net_cfg)?;
    checkpoint::load(net.store_mut(), checkpoint_path)?;
    Ok(net)
}
