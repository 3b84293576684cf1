use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant leaf (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Elementwise `self += scale * other` over matching names.
    pub fn axpy(&mut self, scale: f64, other: &ParamStore) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::dim("axpy", t.shape(), o.shape()));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.scale_in_place(c);
        }
    }
}

/// Graph handles for a [`ParamStore`] bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects per-parameter gradients (zeros for unreached ones).
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.take(*v));
        }
        out
    }
}
