//! Plain SGD and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{round, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// No momentum.
    Sgd,
    AdamW { weight_decay: f64 },
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `θ ← θ − lr·g`
pub fn sgd_step(param: &mut Tensor, grad: &[f64], lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p = round(*p - lr * g);
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = round(*v * s));
        }
    }
    norm
}

/// Moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update at step `t` (1-based):
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, t: u64, lr: f64, weight_decay: f64) {
    let n = grad.len();
    if state.m.len() != n {
        state.m = vec![0.0; n];
        state.v = vec![0.0; n];
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for (k, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[k];
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        *p = round(*p - lr * weight_decay * *p - lr * mh / (vh.sqrt() + ADAM_EPS));
    }
}

/// Applies one optimizer step to every trainable tensor that has a gradient.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    kind: Option<OptimizerKind>,
    step: u64,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind: Some(kind),
            step: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Weight decay applies to matrices only (not biases, scalars or the
    /// fusion kernel).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Optimizer(format!("gradient shape mismatch for `{name}`")));
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Optimizer(format!(
                    "non-finite gradient in `{name}` at element {bad}"
                )));
            }
        }
        self.step += 1;
        let kind = self.kind.unwrap_or(OptimizerKind::Sgd);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if !p.requires_grad() {
                continue;
            }
            match kind {
                OptimizerKind::Sgd => sgd_step(p, g.data(), lr),
                OptimizerKind::AdamW { weight_decay } => {
                    let wd = if p.rank() >= 2 { weight_decay } else { 0.0 };
                    let st = self.states.entry(name.clone()).or_default();
                    adamw_step(p, g.data(), st, self.step, lr, wd);
                }
            }
        }
        Ok(())
    }
}
