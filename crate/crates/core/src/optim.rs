//! AdamW: Adam moment estimates with bias correction and weight decay
//! applied directly to the weights.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Whether biases and normalization parameters are decayed too.
    pub decay_all: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
            decay_all: true,
        }
    }
}

/// Optimizer state: step count and the two moment estimates per trainable
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |kind: ParamKind, t: &Tensor<T>| kind.trainable().then(|| Tensor::zeros(t.shape()));
        let m: Vec<_> = params.iter().map(|(_, s, t)| zeros(s.kind, t)).collect();
        Self {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    fn decays(&self, kind: ParamKind) -> bool {
        self.cfg.decay_all || kind == ParamKind::Weight
    }

    /// One update at learning rate `lr`:
    /// `w ← w·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`. Parameters without a gradient
    /// are still decayed; their moments decay toward zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - num_traits::Float::powi(c.beta1, self.step as i32));
        let bc2 = T::lit(1.0 - num_traits::Float::powi(c.beta2, self.step as i32));
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let kind = params.spec(id).kind;
            if !kind.trainable() {
                continue;
            }
            let keep = if self.decays(kind) {
                T::one() - lr_t * T::lit(c.weight_decay)
            } else {
                T::one()
            };
            let g = grads.get(id);
            let (m, v) = (
                self.m[i].as_mut().expect("moment for trainable parameter"),
                self.v[i].as_mut().expect("moment for trainable parameter"),
            );
            let w = params.get_mut(id).data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..w.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                md[j] = b1 * md[j] + (T::one() - b1) * gj;
                vd[j] = b2 * vd[j] + (T::one() - b2) * gj * gj;
                let update = (md[j] / bc1) / ((vd[j] / bc2).sqrt() + eps);
                w[j] = w[j] * keep - lr_t * update;
            }
        }
    }
}
