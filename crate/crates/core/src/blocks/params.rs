//! Named parameter storage and the small layers the blocks are built from.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;
use crate::tensor::{Graph, NormMode, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable, bound as a gradient-tracking leaf.
    Param,
    /// Persistent state (normalisation statistics), never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    kind: EntryKind,
    value: Tensor<T>,
}

/// Ordered collection of named tensors. Registration order is the canonical
/// order for binding, optimisation and checkpoints.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, EntryKind, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.kind, &e.value))
    }

    /// Trainable entries in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, _, k, _)| *k == EntryKind::Param)
            .map(|(id, n, _, t)| (id, n, t))
    }

    /// Trainable entries in registration order, mutably.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &mut e.value))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params().map(|(id, _, _)| id).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params().map(|(_, _, t)| t.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().map(|(_, _, t)| t.numel()).sum()
    }

    /// Binds every trainable entry as a gradient-tracking leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                EntryKind::Param => Some(g.param(e.value.clone())),
                EntryKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Binds trainable entries to caller-supplied leaves, given in [`ParamStore::params`] order.
    pub fn bind_to(&self, vars: &[Var]) -> Result<Bound, TensorError> {
        let mut it = vars.iter();
        let bound = self
            .entries
            .iter()
            .map(|e| match e.kind {
                EntryKind::Param => it.next().copied(),
                EntryKind::Buffer => None,
            })
            .collect::<Vec<_>>();
        let n_params = self.params().count();
        if vars.len() != n_params {
            return Err(TensorError::Contract(format!(
                "bind_to: {} leaves for {} parameters",
                vars.len(),
                n_params
            )));
        }
        Ok(Bound { vars: bound })
    }

    pub fn apply(&mut self, updates: Vec<BufferUpdate<T>>) {
        for u in updates {
            self.entries[u.id.0].value = u.value;
        }
    }

    /// Order-sensitive digest of every stored value; used to assert that
    /// inference leaves a model untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for b in e.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in e.value.data() {
                h = (h ^ v.to_f64().to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// Graph leaves for one forward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is bound")
    }
}

/// A replacement value for a buffer, produced by a train-mode forward.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

/// Everything a block needs during one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub train: bool,
    pub updates: Vec<BufferUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, bound: &'a Bound, train: bool) -> Self {
        Self {
            g,
            store,
            bound,
            train,
            updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Deterministic initialisers.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
    }
}

/// Zero padding `(before, after)` that gives an output of `ceil(n / stride)`
/// along an axis of length `n`.
pub fn same_padding(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out.max(1) - 1) * stride + k).saturating_sub(n);
    (total / 2, total - total / 2)
}

/// 2-D convolution with optional bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let weight = store.register(
            format!("{name}.weight"),
            EntryKind::Param,
            init.normal(&[cout, cin, k, k], (2.0 / fan_in).sqrt()),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), EntryKind::Param, Tensor::zeros(&[cout])));
        Self { weight, bias, stride }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        let k = cx.store.get(self.weight).shape()[2];
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::shape("conv2d", &shape, cx.store.get(self.weight).shape()));
        }
        let pad = same_padding(shape[2], k, self.stride);
        if pad != same_padding(shape[3], k, self.stride) {
            return Err(TensorError::config(
                "conv2d",
                format!("{}x{} input needs different padding per axis", shape[2], shape[3]),
            ));
        }
        cx.g.conv2d_padded(x, w, b, self.stride, pad)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

static WARNED_UNTRACKED: AtomicBool = AtomicBool::new(false);

/// Batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), EntryKind::Param, Tensor::ones(&[channels])),
            beta: store.register(format!("{name}.beta"), EntryKind::Param, Tensor::zeros(&[channels])),
            running_mean: store.register(
                format!("{name}.running_mean"),
                EntryKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.register(
                format!("{name}.running_var"),
                EntryKind::Buffer,
                Tensor::ones(&[channels]),
            ),
            tracked: store.register(format!("{name}.tracked"), EntryKind::Buffer, Tensor::zeros(&[1])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (gamma, beta) = (cx.p(self.gamma), cx.p(self.beta));
        if cx.train {
            let (y, stats) = cx.g.batch_norm(x, gamma, beta, NormMode::Train { eps: BN_EPS })?;
            let (mean, var) = stats.expect("train mode reports statistics");
            let keep = T::from_f64(BN_MOMENTUM);
            let take = T::from_f64(1.0 - BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::new(
                    old.shape().to_vec(),
                    old.data().iter().zip(new).map(|(&o, &n)| keep * o + take * n).collect(),
                )
            };
            let rm = blend(cx.store.get(self.running_mean), &mean)?;
            let rv = blend(cx.store.get(self.running_var), &var)?;
            let tracked = cx.store.get(self.tracked).item() + T::one();
            cx.updates.push(BufferUpdate {
                id: self.running_mean,
                value: rm,
            });
            cx.updates.push(BufferUpdate {
                id: self.running_var,
                value: rv,
            });
            cx.updates.push(BufferUpdate {
                id: self.tracked,
                value: Tensor::scalar(tracked).reshaped(&[1])?,
            });
            Ok(y)
        } else {
            if cx.store.get(self.tracked).item() == T::zero()
                && !WARNED_UNTRACKED.swap(true, Ordering::Relaxed)
            {
                log::warn!(
                    "normalisation '{}' evaluated before any training update; using initial statistics",
                    cx.store.name(self.gamma)
                );
            }
            let (y, _) = cx.g.batch_norm(
                x,
                gamma,
                beta,
                NormMode::Eval {
                    mean: cx.store.get(self.running_mean).data(),
                    var: cx.store.get(self.running_var).data(),
                    eps: BN_EPS,
                },
            )?;
            Ok(y)
        }
    }
}

/// conv → norm → relu.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv::new(store, init, &format!("{name}.conv"), cin, cout, k, stride, false);
        let norm = Norm::new(store, &format!("{name}.norm"), cout);
        Self { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        cx.g.relu(y)
    }
}
