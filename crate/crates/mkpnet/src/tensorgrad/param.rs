//! Named trainable parameters, grouped by dotted-name prefix.
//!
//! Group membership is the name's first segment (`bert.`, `semantic.`,
//! `coarse.`, `fine_ere.`, `fine_drr.`), which gives the sharing contract a
//! single storage location per group with no double counting.

use std::collections::HashMap;

use super::graph::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
}

impl Param {
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn param_at(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub(crate) fn idx_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, contrib: &[f32]) {
        let p = &mut self.params[idx];
        let n = p.value.numel();
        let g = p.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi += c;
        }
    }
}

/// Tracks which parameters were inserted into a graph as leaves, so their
/// gradients can be harvested after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    bound: Vec<(usize, TensorId)>,
    by_idx: HashMap<usize, TensorId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the named parameter as a requires-grad leaf (once per graph).
    pub fn bind(&mut self, g: &mut Graph, ps: &ParamSet, name: &str) -> Result<TensorId> {
        let idx = ps
            .idx_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if let Some(&id) = self.by_idx.get(&idx) {
            return Ok(id);
        }
        let id = g.leaf(ps.param_at(idx).value.clone(), true)?;
        self.bound.push((idx, id));
        self.by_idx.insert(idx, id);
        Ok(id)
    }

    /// Accumulates graph gradients back into the parameter set.
    pub fn harvest(&self, g: &Graph, ps: &mut ParamSet) {
        for &(idx, id) in &self.bound {
            if let Some(grad) = g.grad(id) {
                ps.accumulate_grad(idx, grad);
            }
        }
    }

    /// Leaf ids of every bound parameter, in bind order.
    pub fn bound_ids(&self) -> Vec<TensorId> {
        self.bound.iter().map(|&(_, id)| id).collect()
    }
}
