use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::Rng;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Cloning yields an independent store with a fresh
/// identity, so a graph can tell a live network from its target copy.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform initialised weight matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrite values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::contract(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub(crate) fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}
