use std::ops::Index;

use crate::autograd::{Graph, Var};
use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer group a trainable tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Layer weights, batch-norm affine terms, classifier.
    Weights,
    /// α, β, pruning scores and ψ.
    Arch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Named trainable tensors in creation order. Ids are stable for the life
/// of a network; names are stable across networks built from one profile.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Graph vars for every parameter of a store, bound for one pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Substitutes the var used for one parameter.
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(SnasError::invalid(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.params.push(Param { name, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.find(name)
            .map(|id| self.value(id))
            .ok_or_else(|| SnasError::invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        )
    }

    /// Gradient of each parameter after `g.backward`, `None` when the pass
    /// never reached it.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Vec<T>>> {
        bound
            .0
            .iter()
            .map(|&v| g.grad(v).map(<[T]>::to_vec))
            .collect()
    }

    /// Copies every same-named, same-shaped tensor from `other`; returns how
    /// many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}
