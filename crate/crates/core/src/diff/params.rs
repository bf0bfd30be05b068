use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{DiffError, Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named learnable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter `{name}`");
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor { shape: t.shape.clone(), values: vec![0.0; t.len()] }))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    /// `self += scale * other`, name by name.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, t) in self.tensors.iter_mut() {
            let o = &other.tensors[name];
            t.values.iter_mut().zip(&o.values).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.values.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect() }
    }
}

/// Tape handles for a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, DiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::Invalid { op: "param", message: format!("missing parameter `{name}`") })
    }

    /// Collects the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients) -> ParamSet {
        ParamSet { tensors: self.vars.iter().map(|(k, &v)| (k.clone(), grads.get(v))).collect() }
    }
}
