//! The full segmentation network and its ablation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ccm::{Ccm, ClassActivation};
use super::heads::{AuxHead, Backbone, FusionHead};
use super::mce::DEFAULT_KERNELS;
use super::params::{Bound, BufferUpdate, Ctx, EntryKind, Init, ParamId, ParamStore};
use super::scm::{Scm, DEFAULT_REDUCTION};
use crate::error::TensorError;
use crate::tensor::{Graph, PoolMode, Scalar, Tensor, Var};

/// Which context modules are present and how they are connected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Channel module feeding the spatial module (tandem).
    #[default]
    Ctnet,
    /// Channel module only.
    Occm,
    /// Spatial module only, with a learned class feature matrix.
    Oscm,
    /// Both modules side by side on the backbone feature.
    Panet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ctnet, Variant::Occm, Variant::Oscm, Variant::Panet];

    pub fn has_ccm(self) -> bool {
        !matches!(self, Variant::Oscm)
    }

    pub fn has_scm(self) -> bool {
        !matches!(self, Variant::Occm)
    }

    /// Whether the class feature matrix is a free parameter instead of the
    /// channel module's output.
    pub fn learned_class_matrix(self) -> bool {
        matches!(self, Variant::Oscm | Variant::Panet)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ctnet" => Ok(Variant::Ctnet),
            "occm" => Ok(Variant::Occm),
            "oscm" => Ok(Variant::Oscm),
            "panet" => Ok(Variant::Panet),
            other => Err(format!("unknown variant '{other}' (ctnet|occm|oscm|panet)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ctnet => "ctnet",
            Variant::Occm => "occm",
            Variant::Oscm => "oscm",
            Variant::Panet => "panet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Head channel count `C`.
    pub channels: usize,
    /// Category count `N`.
    pub classes: usize,
    pub in_channels: usize,
    /// Output channels per backbone stage; the last must equal `channels`.
    pub stage_channels: Vec<usize>,
    /// Stride per backbone stage; the product must be 8.
    pub stage_strides: Vec<usize>,
    /// Backbone stage feeding the auxiliary head.
    pub aux_tap: usize,
    pub mce_kernels: Vec<usize>,
    pub mce_pool: PoolMode,
    pub reduction: usize,
    pub class_activation: ClassActivation,
    pub seed: u64,
}

/// Output resolution divisor of the backbone.
pub const OUTPUT_STRIDE: usize = 8;

impl NetworkConfig {
    pub fn new(variant: Variant, channels: usize, classes: usize) -> Self {
        Self {
            variant,
            channels,
            classes,
            in_channels: 3,
            stage_channels: vec![16, 32, channels, channels],
            stage_strides: vec![2, 2, 2, 1],
            aux_tap: 2,
            mce_kernels: DEFAULT_KERNELS.to_vec(),
            mce_pool: PoolMode::Avg,
            reduction: DEFAULT_REDUCTION,
            class_activation: ClassActivation::Sigmoid,
            seed: 0,
        }
    }

    /// A very small configuration for gradient checks.
    pub fn tiny(variant: Variant, channels: usize, classes: usize) -> Self {
        Self {
            stage_channels: vec![4, 4, channels],
            stage_strides: vec![2, 2, 2],
            aux_tap: 1,
            mce_kernels: vec![3, 5],
            reduction: 2,
            ..Self::new(variant, channels, classes)
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let err = |msg: String| Err(TensorError::config("network config", msg));
        if self.classes == 0 {
            return err("class count must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return err(format!(
                "{} stage channel counts for {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            ));
        }
        if self.stage_strides.iter().product::<usize>() != OUTPUT_STRIDE {
            return err(format!("stage strides {:?} do not total {OUTPUT_STRIDE}", self.stage_strides));
        }
        if self.stage_channels.last() != Some(&self.channels) {
            return err(format!(
                "last stage has {} channels, head expects {}",
                self.stage_channels.last().unwrap(),
                self.channels
            ));
        }
        if self.aux_tap >= self.stage_channels.len() {
            return err(format!("aux_tap {} but only {} stages", self.aux_tap, self.stage_channels.len()));
        }
        if self.channels < 3 {
            return err(format!("need at least 3 head channels, got {}", self.channels));
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return err(format!(
                "channels {} not divisible by reduction ratio {}",
                self.channels, self.reduction
            ));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct NetOutput<T> {
    /// Main logits `[B, N, H, W]` at input resolution.
    pub main: Var,
    /// Auxiliary logits `[B, N, H, W]` at input resolution.
    pub aux: Var,
    /// Class-presence probabilities `[B, N]` (absent without the channel module).
    pub p_p: Option<Var>,
    pub c_m: Option<Var>,
    /// Class feature matrix `[B, C, N]` consumed by the spatial module.
    pub m: Option<Var>,
    pub affinity: Option<Var>,
    /// Running-statistic updates from a train-mode pass; apply with
    /// [`CtNet::apply_updates`].
    pub updates: Vec<BufferUpdate<T>>,
}

/// Eval-mode outputs materialised as tensors.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub main: Tensor<T>,
    pub aux: Tensor<T>,
    pub p_p: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Parts {
    backbone: Backbone,
    ccm: Option<Ccm>,
    scm: Option<Scm>,
    learned_m: Option<ParamId>,
    head: FusionHead,
    aux: AuxHead,
}

#[derive(Clone, Debug)]
pub struct CtNet<T: Scalar> {
    cfg: NetworkConfig,
    store: ParamStore<T>,
    parts: Parts,
}

impl<T: Scalar> CtNet<T> {
    /// Builds and initialises a network; initial values depend only on `cfg.seed`.
    pub fn new(cfg: NetworkConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let (c, n) = (cfg.channels, cfg.classes);
        let backbone = Backbone::new(
            &mut store,
            &mut init,
            "backbone",
            cfg.in_channels,
            &cfg.stage_channels,
            &cfg.stage_strides,
        );
        let ccm = if cfg.variant.has_ccm() {
            Some(Ccm::new(
                &mut store,
                &mut init,
                "ccm",
                c,
                n,
                &cfg.mce_kernels,
                cfg.mce_pool,
                cfg.class_activation,
            )?)
        } else {
            None
        };
        let learned_m = cfg.variant.learned_class_matrix().then(|| {
            let bound = 1.0 / (c as f64).sqrt();
            let m: Tensor<T> = init.uniform(&[1, c, n], bound);
            store.register("scm.class_matrix", EntryKind::Param, m)
        });
        let scm = if cfg.variant.has_scm() {
            Some(Scm::new(&mut store, &mut init, "scm", c, cfg.reduction)?)
        } else {
            None
        };
        let head = FusionHead::new(&mut store, &mut init, "head", c, n, cfg.variant.has_scm());
        let aux = AuxHead::new(&mut store, &mut init, "aux", cfg.stage_channels[cfg.aux_tap], n);
        Ok(Self {
            cfg,
            store,
            parts: Parts {
                backbone,
                ccm,
                scm,
                learned_m,
                head,
                aux,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Effective kernel sizes of the excitation block (empty without it).
    pub fn mce_kernels(&self) -> Vec<usize> {
        self.parts.ccm.as_ref().map(|c| c.mce.kernels.clone()).unwrap_or_default()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> CtNet<U> {
        let mut store = ParamStore::new();
        for (_, name, kind, t) in self.store.iter() {
            store.register(name, kind, t.cast());
        }
        CtNet {
            cfg: self.cfg.clone(),
            store,
            parts: self.parts.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.store.bind(g)
    }

    pub fn apply_updates(&mut self, updates: Vec<BufferUpdate<T>>) {
        self.store.apply(updates);
    }

    /// Rejects inputs the network cannot process, before any compute.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), TensorError> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(TensorError::config(
                "ctnet",
                format!("expected [B, {}, H, W] input, got {shape:?}", self.cfg.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(TensorError::config(
                "ctnet",
                format!("input size {h}x{w} is not a positive multiple of {OUTPUT_STRIDE}"),
            ));
        }
        Ok(())
    }

    /// Records a forward pass of `images[B, 3, H, W]` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, images: Var, train: bool) -> Result<NetOutput<T>, TensorError> {
        let shape = g.shape(images).to_vec();
        self.check_input(&shape)?;
        let (h, w) = (shape[2], shape[3]);
        let p = &self.parts;
        let mut cx = Ctx::new(g, &self.store, bound, train);

        let stages = p.backbone.forward(&mut cx, images)?;
        let x = *stages.last().expect("at least one stage");
        let batch = shape[0];
        let learned_m = match p.learned_m {
            Some(id) => Some(cx.g.repeat_batch(cx.p(id), batch)?),
            None => None,
        };

        let ccm_out = match &p.ccm {
            Some(ccm) => Some(ccm.forward(&mut cx, x)?),
            None => None,
        };
        let x_c = ccm_out.map_or(x, |o| o.x_c);
        let scm_out = match &p.scm {
            Some(scm) => {
                let (input, m) = match self.cfg.variant {
                    Variant::Ctnet => (x_c, ccm_out.expect("ctnet has ccm").m),
                    _ => (x, learned_m.expect("learned class matrix")),
                };
                Some(scm.forward(&mut cx, input, m)?)
            }
            None => None,
        };
        let logits = p.head.forward(&mut cx, x_c, scm_out.map(|o| o.x_s))?;
        let main = cx.g.resize_bilinear(logits, h, w)?;
        let aux = p.aux.forward(&mut cx, stages[self.cfg.aux_tap])?;
        let aux = cx.g.resize_bilinear(aux, h, w)?;

        let m = match self.cfg.variant {
            Variant::Ctnet | Variant::Occm => ccm_out.map(|o| o.m),
            Variant::Oscm | Variant::Panet => learned_m,
        };
        Ok(NetOutput {
            main,
            aux,
            p_p: ccm_out.map(|o| o.p_p),
            c_m: ccm_out.map(|o| o.c_m),
            m,
            affinity: scm_out.map(|o| o.affinity),
            updates: cx.updates,
        })
    }

    /// Eval-mode forward without gradient bookkeeping for the caller. Never
    /// modifies the network.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction<T>, TensorError> {
        self.check_input(images.shape())?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &bound, x, false)?;
        Ok(Prediction {
            main: g.value(out.main).clone(),
            aux: g.value(out.aux).clone(),
            p_p: out.p_p.map(|v| g.value(v).clone()),
        })
    }
}
