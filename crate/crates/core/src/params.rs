//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named parameter tensors.
///
/// Registration order is the canonical order for optimizer state and the
/// checkpoint payload.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// He-uniform kernel: `U(-b, b)` with `b = sqrt(6 / fan_in)`, where
    /// `fan_in` is the product of all but the leading extent.
    pub fn add_he_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        Ok(self.add(name, Tensor::uniform(shape, -bound, bound, rng)?))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor<R>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph<R>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| g.input(t.clone())).collect())
    }

    /// Registers every parameter as a constant (inference, frozen weights).
    pub fn bind_frozen(&self, g: &Graph<R>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for every parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Handles in [`ParamStore`] registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of all bound parameters after `g.backward`; parameters that
    /// did not influence the loss get zeros.
    pub fn grads<R: Real>(&self, g: &Graph<R>, store: &ParamStore<R>) -> Vec<Tensor<R>> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| t.map(|_| R::zero())))
            .collect()
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
