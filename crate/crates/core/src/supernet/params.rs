//! Central storage for learnable parameters.
//!
//! Every learnable tensor (conv weights, head weight/bias, per-bank BN affine
//! parameters, per-bit quantizer steps) lives in one [`ParamStore`] and is
//! addressed by a stable [`ParamId`]. Construction order is deterministic, so
//! identifiers double as checkpoint and optimizer-state keys.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in construction order; stable across runs for a fixed
    /// architecture and configuration space.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_index(&self, index: usize) -> Result<(&str, &Tensor)> {
        self.entries
            .get(index)
            .map(|e| (e.name.as_str(), &e.value))
            .ok_or_else(|| Error::invalid(format!("parameter index {index} out of range")))
    }

    pub fn by_index_mut(&mut self, index: usize) -> Result<&mut Tensor> {
        let n = self.entries.len();
        self.entries
            .get_mut(index)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::invalid(format!("parameter index {index} out of range ({n})")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total scalar count across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copy every parameter value from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(
                "ParamStore::copy_values_from",
                format!("{} parameters", self.entries.len()),
                format!("{}", other.entries.len()),
            ));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape(
                    "ParamStore::copy_values_from",
                    format!("{} with shape {:?}", dst.name, dst.value.shape()),
                    format!("{:?}", src.value.shape()),
                ));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_and_named() {
        let mut store = ParamStore::new();
        let a = store.add("w0", Tensor::zeros(vec![2, 2]));
        let b = store.add("w1", Tensor::full(vec![3], 1.0));
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(store.name(a), "w0");
        assert_eq!(store.get(b).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.total_values(), 7);
    }

    #[test]
    fn copy_values_requires_matching_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(vec![2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::full(vec![2], 3.0));
        a.copy_values_from(&b).unwrap();
        assert_eq!(a.by_index(0).unwrap().1.data(), &[3.0, 3.0]);
        let mut c = ParamStore::new();
        c.add("w", Tensor::zeros(vec![3]));
        assert!(a.copy_values_from(&c).is_err());
        let d = ParamStore::new();
        assert!(a.copy_values_from(&d).is_err());
    }
}
