use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to one registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer and the counters treat a registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and subject to weight decay (projection and conv kernels).
    Weight,
    /// Trainable, excluded from weight decay (biases, norms, residual coefficients).
    NoDecay,
    /// Non-trainable running state, e.g. batch-norm statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

fn fresh_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Registry of every tensor a model owns. Shared weights are registered once
/// and referenced by [`ParamId`] from each place that uses them.
#[derive(Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
    uid: u64,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
            uid: fresh_uid(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            uid: fresh_uid(),
        }
    }

    /// Identity of this store; clones get a new one.
    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(id, _)| id)
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.len() as u64)
            .sum()
    }

    /// Replaces a tensor's value, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}
