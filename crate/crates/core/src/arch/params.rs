use std::collections::HashMap;

use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics; updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor<f32>,
    pub kind: ParamKind,
}

/// Named tensors of a model in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>, kind: ParamKind) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: usize) -> &Tensor<f32> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<f32> {
        &mut self.entries[id].value
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.id(name).map(|i| &mut self.entries[i].value)
    }

    pub fn weight_ids(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].kind == ParamKind::Weight).collect()
    }

    /// Number of trainable scalars.
    pub fn count_weights(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.len()).sum()
    }

    /// Puts every weight on the tape; buffers are read from the store directly.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Weight if trainable => Some(g.param(e.value.clone())),
                ParamKind::Weight => Some(g.constant(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of every weight after `backward`, zero where none flowed.
    pub fn collect_grads(&self, g: &Graph<f32>, bound: &Bound) -> Vec<Tensor<f32>> {
        self.weight_ids()
            .into_iter()
            .map(|i| {
                let v = bound.var(i);
                g.grad(v).unwrap_or_else(|| Tensor::zeros(self.entries[i].value.shape()))
            })
            .collect()
    }

    /// Mutable references to the weights, aligned with [`ParamStore::collect_grads`].
    pub fn weights_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.entries.iter_mut().filter(|e| e.kind == ParamKind::Weight).map(|e| &mut e.value).collect()
    }
}

/// Tape handles for the weights of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id].expect("buffer has no tape handle")
    }
}
