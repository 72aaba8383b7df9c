//! Named parameter storage.
//!
//! All trainable tensors of a model (and of its attached heads) live in
//! [`ParamStore`]s in declaration order. That order is the contract for
//! checkpoint layout, optimizer state alignment and enumeration reports.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
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
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn total_scalars(&self) -> u64 {
        self.entries.iter().map(|p| p.value.len() as u64).sum()
    }

    /// Sums per top-level name segment ("text_tower.layer0.attn.wq" counts
    /// toward "text_tower").
    pub fn group_totals(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = BTreeMap::new();
        for p in &self.entries {
            let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
            *out.entry(group).or_insert(0) += p.value.len() as u64;
        }
        out
    }
}

/// Maps a store's [`ParamId`]s onto leaf [`VarId`]s of one tape binding.
#[derive(Debug, Clone, Copy)]
pub struct StoreBinding {
    offset: usize,
}

impl StoreBinding {
    pub fn var(&self, id: ParamId) -> VarId {
        self.offset + id.0
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

/// Inserts every parameter of `store` as a tape leaf, in declaration order.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> StoreBinding {
    let offset = tape.len();
    for p in store.entries() {
        tape.leaf(p.value.clone());
    }
    StoreBinding { offset }
}
