use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TapeError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

/// How a store's parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters become gradient-receiving leaves.
    Live,
    /// Every parameter enters as a constant; gradients still flow through
    /// the computation into other inputs, but never into these values.
    Frozen,
}

/// Tape handles for every parameter of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TapeError::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(TapeError::InvalidArgument(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(TapeError::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, mode: BindMode) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), mode == BindMode::Live && p.trainable))
            .collect();
        Bound { vars }
    }

    /// Gradients of every parameter in store order; `None` for parameters
    /// that were bound as constants.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

/// Euclidean norm over a set of gradients.
pub fn grad_norm<T: Element>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn frozen_binding_yields_no_gradient() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::ones(&[3]), true).unwrap();
        let mut tape = Tape::new();
        let live = s.bind(&mut tape, BindMode::Live);
        let frozen = s.bind(&mut tape, BindMode::Frozen);
        let a = tape.sum(live.var(ParamId(0))).unwrap();
        let b = tape.sum(frozen.var(ParamId(0))).unwrap();
        let l = tape.add(a, b).unwrap();
        let mut g = tape.backward(l).unwrap();
        assert!(s.collect_grads(&frozen, &mut g)[0].is_none());
        assert_eq!(s.collect_grads(&live, &mut g)[0].as_ref().unwrap(), &Tensor::ones(&[3]));
    }
}
