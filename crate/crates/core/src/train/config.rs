//! Training configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are skipped. Keys:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data` | `data` | dataset root written by `gen-data` |
//! | `out` | `run` | output directory for checkpoints and metrics |
//! | `variant` | `ctnet` | `ctnet`, `occm`, `oscm` or `panet` |
//! | `channels` | 64 | head channel count |
//! | `seed` | 0 | initialisation and batch-order seed |
//! | `batch` | 8 | images per step |
//! | `iters` | 2000 | optimiser steps |
//! | `lr` | 0.01 | base learning rate |
//! | `momentum` | 0.9 | |
//! | `weight_decay` | 1e-4 | |
//! | `power` | 0.9 | poly schedule exponent |
//! | `eval_every` | 200 | validation cadence in steps |
//! | `log_every` | 20 | training-loss log cadence in steps |
//! | `augment` | true | random flip, scale and rotation |
//! | `loss.alpha` | 0.3 | auxiliary loss weight |
//! | `loss.beta` | 0.1 | class-probability loss weight |
//! | `loss.omega` | 1.0 | class-probability batch weight |
//! | `reduction` | 4 | spatial-module projection ratio |
//! | `mce.kernels` | `9,17,33,65` | channel-excitation kernel sizes |
//! | `class_activation` | `sigmoid` | `sigmoid` or `softmax` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::blocks::{ClassActivation, NetworkConfig, Variant, DEFAULT_KERNELS, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, ObjectiveConfig};

use super::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: Variant,
    pub channels: usize,
    pub seed: u64,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub eval_every: usize,
    pub log_every: usize,
    pub augment: bool,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub reduction: usize,
    pub mce_kernels: Vec<usize>,
    pub class_activation: ClassActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        let weights = LossWeights::default();
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            variant: Variant::Ctnet,
            channels: 64,
            seed: 0,
            batch: 8,
            iters: optim.total_iters,
            lr: optim.base_lr,
            momentum: optim.momentum,
            weight_decay: optim.weight_decay,
            power: optim.power,
            eval_every: 200,
            log_every: 20,
            augment: true,
            alpha: weights.alpha,
            beta: weights.beta,
            omega: 1.0,
            reduction: DEFAULT_REDUCTION,
            mce_kernels: DEFAULT_KERNELS.to_vec(),
            class_activation: ClassActivation::Sigmoid,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "variant" => self.variant = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "power" => self.power = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "loss.alpha" => self.alpha = parse(key, value)?,
            "loss.beta" => self.beta = parse(key, value)?,
            "loss.omega" => self.omega = parse(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            "mce.kernels" => {
                self.mce_kernels = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "class_activation" => self.class_activation = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// The full resolved configuration; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kernels: Vec<String> = self.mce_kernels.iter().map(|k| k.to_string()).collect();
        let pairs: [(&str, String); 20] = [
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("variant", self.variant.to_string()),
            ("channels", self.channels.to_string()),
            ("seed", self.seed.to_string()),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("power", format!("{:?}", self.power)),
            ("eval_every", self.eval_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("augment", self.augment.to_string()),
            ("loss.alpha", format!("{:?}", self.alpha)),
            ("loss.beta", format!("{:?}", self.beta)),
            ("loss.omega", format!("{:?}", self.omega)),
            ("reduction", self.reduction.to_string()),
            ("mce.kernels", kernels.join(",")),
            ("class_activation", self.class_activation.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if self.iters == 0 {
            return fail("iters must be positive");
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return fail("eval_every and log_every must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.power > 0.0 && self.omega >= 0.0) {
            return fail("weight_decay and loss.omega must be non-negative, power positive");
        }
        self.weights().validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights(),
            omega: self.omega,
            ..ObjectiveConfig::default()
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            base_lr: self.lr,
            total_iters: self.iters,
            power: self.power,
        }
    }

    pub fn network(&self, classes: usize) -> NetworkConfig {
        NetworkConfig {
            mce_kernels: self.mce_kernels.clone(),
            reduction: self.reduction,
            class_activation: self.class_activation,
            seed: self.seed,
            ..NetworkConfig::new(self.variant, self.channels, classes)
        }
    }
}
