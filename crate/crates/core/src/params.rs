//! Named parameter storage and the per-forward context.
//!
//! Model structs only hold [`ParamId`]s; values live in a [`ParamStore`].
//! Two blocks that share weights hold the same ids, so they read (and are
//! updated through) the identical tensors.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Var};
use crate::ops::BatchStats;
use crate::rng;
use crate::tensor::{numel, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
    /// Inputs feeding each output unit; sets the init scale of weights.
    pub fan_in: usize,
}

/// Ordered registry of parameter names and shapes, built while a model is
/// constructed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    scope: Vec<String>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    pub fn add(&mut self, name: &str, shape: Shape, kind: ParamKind, fan_in: usize) -> ParamId {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        assert!(
            self.specs.iter().all(|s| s.name != full),
            "duplicate parameter name {full}"
        );
        self.specs.push(ParamSpec {
            name: full,
            shape,
            kind,
            fan_in,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| numel(&s.shape))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Fan-in scaled normal weights (`std = sqrt(2 / fan_in)`), zero biases
    /// and shifts, unit scales, running statistics at `(0, 1)`. Each tensor
    /// draws from its own stream keyed by `(seed, index)`.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let values = layout
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.kind {
                ParamKind::Weight => {
                    let std = num_traits::Float::sqrt(2.0 / spec.fan_in.max(1) as f64);
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let mut r = rng::rng_for(&[seed, rng::stream::INIT, i as u64]);
                    Tensor::from_fn(spec.shape, |_| T::lit(dist.sample(&mut r)))
                }
                ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => {
                    Tensor::zeros(spec.shape)
                }
                ParamKind::NormScale | ParamKind::RunningVar => Tensor::ones(spec.shape),
            })
            .collect();
        Self {
            specs: layout.specs.clone(),
            values,
        }
    }

    /// Builds a store from explicit values, checking names and shapes
    /// against the layout.
    pub fn from_named(layout: &ParamLayout, mut named: BTreeMap<String, Tensor<T>>) -> crate::Result<Self> {
        let mut values = Vec::with_capacity(layout.len());
        for spec in &layout.specs {
            let t = named.remove(&spec.name).ok_or_else(|| {
                crate::Error::Incompatible(alloc::format!("missing tensor `{}`", spec.name))
            })?;
            if t.shape() != spec.shape {
                return Err(crate::Error::Incompatible(alloc::format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            values.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(crate::Error::Incompatible(alloc::format!(
                "unexpected tensor `{extra}`"
            )));
        }
        Ok(Self {
            specs: layout.specs.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSpec, &Tensor<T>)> {
        self.specs
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (s, v))| (ParamId(i), s, v))
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, s, _)| s.kind.trainable())
            .map(|(_, _, v)| v.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Folds batch statistics into the running averages:
    /// `running = (1 - momentum) · running + momentum · batch`, with the
    /// unbiased batch variance.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>, momentum: T) {
        for u in updates {
            let count = u.stats.count;
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            let keep = T::one() - momentum;
            for (r, &m) in self.values[u.mean.0].data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in self.values[u.var.0].data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + momentum * v * unbias;
            }
        }
    }
}

/// Batch statistics waiting to be folded into a normalization layer's
/// running averages.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics and reports them.
    Train,
    /// Normalization uses running statistics.
    Eval,
}

/// State of one forward pass: which store it reads, whether normalization
/// uses batch statistics, and whether parameters are differentiable leaves.
pub struct Ctx<'s, T: Real> {
    store: &'s ParamStore<T>,
    mode: Mode,
    track: bool,
    leaves: BTreeMap<ParamId, Var<T>>,
    updates: Vec<StatUpdate<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grad: bool) -> Self {
        Self {
            store,
            mode,
            track: track_grad,
            leaves: BTreeMap::new(),
            updates: Vec::new(),
        }
    }

    /// Batch statistics, gradients tracked.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Mode::Train, true)
    }

    /// Running statistics, no gradients.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The parameter as a graph node. Repeated requests (weight sharing)
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var<T> {
        let (store, track) = (self.store, self.track);
        self.leaves
            .entry(id)
            .or_insert_with(|| {
                let v = store.get(id).clone();
                if track {
                    Var::leaf(v)
                } else {
                    Var::constant(v)
                }
            })
            .clone()
    }

    pub(crate) fn record_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.updates.push(StatUpdate { mean, var, stats });
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        core::mem::take(&mut self.updates)
    }

    /// Gradients of every parameter used in this pass, indexed like the
    /// store. Unused parameters get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        let mut out: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (id, leaf) in &self.leaves {
            out[id.0] = grads.take(leaf);
        }
        ParamGrads(out)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T>(pub Vec<Option<Tensor<T>>>);

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.0[id.0].as_ref()
    }

    pub fn zeros_for(store: &ParamStore<T>) -> Self {
        ParamGrads(store.values.iter().map(|v| Some(Tensor::zeros(v.shape()))).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(Tensor::all_finite)
    }
}
