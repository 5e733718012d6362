//! Experimental histories `h_t = ((d_1, y_1), …, (d_t, y_t))`.

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::grad::{SetLayout, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    designs: Vec<Vec<f64>>,
    outcomes: Vec<Vec<f64>>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from parallel lists; ragged input is a contract violation.
    pub fn from_parts(designs: Vec<Vec<f64>>, outcomes: Vec<Vec<f64>>) -> Result<Self> {
        if designs.len() != outcomes.len() {
            return Err(Error::contract(format!(
                "history has {} designs but {} outcomes",
                designs.len(),
                outcomes.len()
            )));
        }
        Ok(Self { designs, outcomes })
    }

    pub fn push(&mut self, design: Vec<f64>, outcome: Vec<f64>) {
        self.designs.push(design);
        self.outcomes.push(outcome);
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn designs(&self) -> &[Vec<f64>] {
        &self.designs
    }

    pub fn outcomes(&self) -> &[Vec<f64>] {
        &self.outcomes
    }

    /// First `t` steps.
    pub fn truncated(&self, t: usize) -> History {
        let t = t.min(self.len());
        History {
            designs: self.designs[..t].to_vec(),
            outcomes: self.outcomes[..t].to_vec(),
        }
    }

    /// Per-step encoder features, concatenated.
    pub fn features(&self, env: &Environment) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * env.feature_dim());
        for (d, y) in self.designs.iter().zip(&self.outcomes) {
            env.features(d, y, &mut out);
        }
        out
    }
}

/// A padded batch of step-feature sets ready for the history encoder.
#[derive(Clone, Debug)]
pub struct HistoryBatch {
    pub layout: SetLayout,
    pub features: Tensor,
}

impl HistoryBatch {
    /// Each item is a flat run of `steps × feature_dim` values.
    pub fn new(feature_dim: usize, items: &[&[f64]]) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        let mut lengths = Vec::with_capacity(items.len());
        for it in items {
            if it.len() % feature_dim != 0 {
                return Err(Error::contract("history features are not a whole number of steps"));
            }
            lengths.push(it.len() / feature_dim);
        }
        let t_max = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut data = vec![0.0; items.len() * t_max * feature_dim];
        for (b, it) in items.iter().enumerate() {
            data[b * t_max * feature_dim..][..it.len()].copy_from_slice(it);
        }
        Ok(Self {
            layout: SetLayout::new(t_max, lengths)?,
            features: Tensor::matrix(items.len() * t_max, feature_dim, data)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.layout.batch()
    }
}
