//! Named parameter storage with a trainable mask.
//!
//! Every model parameter lives here under a path-style id
//! (e.g. `layer.3.mhsa.w_q.weight`). Injection plans and optimizers see
//! parameters only through this store, so freezing, counting, and
//! checkpointing all operate on one source of truth.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Path-style parameter identifier, e.g. `layer.0.ff.w1.weight`.
pub type ParamId = String;

/// What a parameter does in the model; drives bias-only masks and
/// weight-decay exclusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ParamRole {
    /// Multiplicative projection weight.
    Weight,
    /// Additive bias.
    Bias,
    /// Normalization scale (gamma).
    NormScale,
    /// Normalization shift (beta).
    NormShift,
    /// Learned embedding (CLS token, positions, prompts, prefixes).
    Embedding,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl ParamRole {
    pub(crate) fn to_u8(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::NormScale => 2,
            ParamRole::NormShift => 3,
            ParamRole::Embedding => 4,
            ParamRole::Buffer => 5,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            2 => ParamRole::NormScale,
            3 => ParamRole::NormShift,
            4 => ParamRole::Embedding,
            5 => ParamRole::Buffer,
            _ => return Err(Error::Format(format!("unknown parameter role tag {v}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub role: ParamRole,
}

/// Map from [`ParamId`] to tensors plus the set of trainable ids.
///
/// Deterministic iteration order (BTree-backed) keeps checkpoints, hashes,
/// and optimizer updates reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<ParamId, ParamEntry>,
    trainable: BTreeSet<ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Each id may appear at most once.
    pub fn insert(&mut self, id: impl Into<ParamId>, tensor: Tensor, role: ParamRole) -> Result<()> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate parameter id {id:?}")));
        }
        self.entries.insert(id, ParamEntry { tensor, role });
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn entry(&self, id: &str) -> Result<&ParamEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter id {id:?}")))
    }

    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.entry(id)?.tensor)
    }

    pub fn tensor_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(id)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter id {id:?}")))
    }

    pub fn role(&self, id: &str) -> Result<ParamRole> {
        Ok(self.entry(id)?.role)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn is_trainable(&self, id: &str) -> bool {
        self.trainable.contains(id)
    }

    /// Adds an id to the trainable mask. Buffers are never trainable.
    pub fn mark_trainable(&mut self, id: &str) -> Result<()> {
        let entry = self.entry(id)?;
        if entry.role == ParamRole::Buffer {
            return Err(Error::Contract(format!("buffer {id:?} cannot be trainable")));
        }
        self.trainable.insert(id.to_string());
        Ok(())
    }

    pub fn unmark_trainable(&mut self, id: &str) {
        self.trainable.remove(id);
    }

    /// Swaps the tensor of an existing entry (role kept; shape may
    /// change, e.g. re-sizing a classification head for a new task).
    pub fn replace(&mut self, id: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter id {id:?}")))?;
        entry.tensor = tensor;
        Ok(())
    }

    /// Empties the trainable mask; injection plans re-add their own ids.
    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.trainable.iter()
    }

    /// Total trainable scalars (masked entries only).
    pub fn count_trainable(&self) -> usize {
        self.trainable
            .iter()
            .filter_map(|id| self.entries.get(id))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Total scalars across all non-buffer entries.
    pub fn count_total(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.role != ParamRole::Buffer)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Trainable scalars under an id prefix.
    pub fn count_trainable_prefix(&self, prefix: &str) -> usize {
        self.trainable
            .iter()
            .filter(|id| id.starts_with(prefix))
            .filter_map(|id| self.entries.get(id.as_str()))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// SHA-256 over the frozen, non-buffer entries (ids, shapes, and raw
    /// little-endian bytes). Training must leave this hash unchanged.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (id, e) in &self.entries {
            if e.role == ParamRole::Buffer || self.trainable.contains(id) {
                continue;
            }
            h.update(id.as_bytes());
            h.update([0u8]);
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_id_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]), ParamRole::Weight).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2, 2]), ParamRole::Weight).is_err());
    }

    #[test]
    fn count_trainable_sums_only_masked() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[3, 4]), ParamRole::Weight).unwrap();
        s.insert("b", Tensor::zeros(&[5]), ParamRole::Bias).unwrap();
        assert_eq!(s.count_trainable(), 0);
        s.mark_trainable("b").unwrap();
        assert_eq!(s.count_trainable(), 5);
        s.mark_trainable("a").unwrap();
        assert_eq!(s.count_trainable(), 17);
        s.freeze_all();
        assert_eq!(s.count_trainable(), 0);
    }

    #[test]
    fn buffers_excluded_from_totals_and_mask() {
        let mut s = ParamStore::new();
        s.insert("bn.running_mean", Tensor::zeros(&[8]), ParamRole::Buffer).unwrap();
        s.insert("w", Tensor::zeros(&[2]), ParamRole::Weight).unwrap();
        assert_eq!(s.count_total(), 2);
        assert!(s.mark_trainable("bn.running_mean").is_err());
    }

    #[test]
    fn frozen_hash_ignores_trainable_and_buffers() {
        let mut s = ParamStore::new();
        s.insert("frozen", Tensor::full(&[2], 1.5), ParamRole::Weight).unwrap();
        s.insert("train", Tensor::full(&[2], 2.5), ParamRole::Weight).unwrap();
        s.insert("buf", Tensor::full(&[2], 3.5), ParamRole::Buffer).unwrap();
        s.mark_trainable("train").unwrap();
        let h0 = s.frozen_hash();
        s.tensor_mut("train").unwrap().data_mut()[0] = -9.0;
        s.tensor_mut("buf").unwrap().data_mut()[0] = -9.0;
        assert_eq!(h0, s.frozen_hash());
        s.tensor_mut("frozen").unwrap().data_mut()[0] = -9.0;
        assert_ne!(h0, s.frozen_hash());
    }
}
