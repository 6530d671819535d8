use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors, ordered by name.
///
/// Names are dotted paths (`decoder.pos.gru.w_z`); the prefix before the
/// first dot identifies the owning component. A tensor's `requires_grad`
/// flag decides whether it is trained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Inserts a trainable Gaussian-initialised tensor.
    pub fn init_randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        self.insert(name, Tensor::randn(shape, std, rng).with_grad());
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape).with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(name, self.get(name)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn numel(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, flag: bool) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// Copies every tensor of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, t) in &other.tensors {
            self.tensors.insert(k.clone(), t.clone());
        }
    }

    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }
}
