use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter and buffer storage shared by every layer of a model.
///
/// Buffers (batch-norm running statistics) are stored alongside trainable
/// weights so that a checkpoint captures the complete model state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

/// Pending running-statistics write produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
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

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Trainable ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.is_trainable(id) && self.name(id).starts_with(prefix))
            .collect()
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            self.entries[u.id.0].tensor.data_mut().copy_from_slice(&u.value);
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copies values for every name present in both stores.
    pub fn copy_matching_from(&mut self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for id in other.ids() {
            let name = other.name(id);
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            let target = format!("{dst_prefix}{rest}");
            if let Some(&dst) = self.index.get(&target) {
                let src = other.get(id);
                let t = self.get_mut(dst);
                if t.shape() != src.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "copy_matching_from",
                        lhs: t.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                t.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamStore::new();
        ps.register("a", Tensor::zeros([1]), true).unwrap();
        assert!(matches!(
            ps.register("a", Tensor::zeros([1]), true),
            Err(Error::DuplicateParameter(_))
        ));
        assert!(ps.lookup("b").is_err());
    }

    #[test]
    fn prefix_copy() {
        let mut a = ParamStore::new();
        a.register("enc.w", Tensor::filled([2], 3.0), true).unwrap();
        a.register("enc.v", Tensor::filled([2], 4.0), true).unwrap();
        let mut b = ParamStore::new();
        let w = b.register("emb.w", Tensor::zeros([2]), true).unwrap();
        assert_eq!(b.copy_matching_from(&a, "enc.", "emb.").unwrap(), 1);
        assert_eq!(b.get(w).data(), &[3.0, 3.0]);
    }
}
