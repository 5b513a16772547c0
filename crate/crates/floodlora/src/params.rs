//! Named parameter storage.
//!
//! All weights of a model live in one [`ParamStore`]; layers hold
//! [`ParamId`] handles. The store is the single place where trainability
//! (`requires_grad`) is toggled per adaptation strategy, where the
//! optimizer finds gradients, and where checkpoints enumerate records in a
//! stable order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Insertion-ordered parameter arena.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids of parameters with `requires_grad` set.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.get(*id).requires_grad)
            .collect()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].value.requires_grad = flag;
    }

    /// Clear any gradients left on the tensors.
    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.value.grad = None;
        }
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.value.requires_grad)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Copy values from `other` by name; shapes must match. Entries of
    /// `self` missing from `other` are left untouched.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.by_name(&e.name) {
                let src = other.get(src);
                if src.shape() != e.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_matching",
                        lhs: e.value.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                let flag = e.value.requires_grad;
                e.value = src.clone().with_requires_grad(flag);
                e.value.grad = None;
                copied += 1;
            }
        }
        Ok(copied)
    }
}
