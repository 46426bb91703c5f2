use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to an entry of a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Ordered collection of named trainable tensors with gradients and moment state.
#[derive(Clone, Debug, Default)]
pub struct ParamBank<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamBank<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    /// Adds `g` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let grad = self.entries[id.0].grad.data_mut();
        debug_assert_eq!(grad.len(), g.len());
        for (a, &b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(T::zero());
        }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid("param load", format!("unknown parameter {name}")))?;
        self.entries[id.0].value.expect_shape("param load", value.shape())?;
        self.entries[id.0].value = value;
        Ok(())
    }
}
