use std::collections::HashMap;

use crate::error::{arg_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named, ordered trainable tensors with their accumulated gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return arg_err("params", format!("duplicate parameter {name:?}"));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Adds the tape's leaf gradients into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (acc, &v) in self.grads.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                acc.add_assign(&g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}
