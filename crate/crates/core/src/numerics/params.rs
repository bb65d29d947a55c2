use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Named parameters with per-name trainable flags.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// consumer (optimizer, checkpoint writer, gradient checker) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        self.trainable.insert(name.clone(), trainable);
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.trainable.get_mut(name) {
            Some(flag) => {
                *flag = trainable;
                Ok(())
            }
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    /// Marks every parameter non-trainable.
    pub fn freeze_all(&mut self) {
        for flag in self.trainable.values_mut() {
            *flag = false;
        }
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

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}
