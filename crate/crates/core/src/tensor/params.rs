use super::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Insertion order is the checkpoint order and the optimizer-state order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a parameter. Names are unique; a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Gradients after `tape.backward`, in parameter order (zeros where unused).
    pub fn grads(&self, tape: &Tape<S>, binding: &Binding) -> Vec<Tensor<S>> {
        binding.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(&[1.0, 2.0]));
        let unused = store.add("unused", Tensor::vector(&[5.0]));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let sq = tape.mul(b.var(a), b.var(a)).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = store.grads(&tape, &b);
        assert_eq!(g[a.index()].data(), &[2.0, 4.0]);
        assert_eq!(g[unused.index()].data(), &[0.0]);
        assert_eq!(store.id("unused"), Some(unused));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(&[1.0]));
        store.add("w", Tensor::vector(&[1.0]));
    }
}
