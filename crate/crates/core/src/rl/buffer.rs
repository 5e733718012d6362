use std::collections::VecDeque;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::history::History;
use crate::rng::Rng;

/// One finished episode. Rewards are recomputed when sampled, except in
/// sPCE mode where they do not depend on any trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub theta: Vec<f64>,
    pub history: History,
    /// Raw policy actions: squashed values in `[−1, 1]` or an action index.
    pub actions: Vec<Vec<f64>>,
    pub fixed_rewards: Option<Vec<f64>>,
}

/// Step `t` of the entry at `entry` (0 is the oldest retained).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub entry: usize,
    pub t: usize,
}

/// FIFO episode store with a capacity counted in transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    entries: VecDeque<ReplayEntry>,
    capacity: usize,
    horizon: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, horizon: usize) -> Result<Self> {
        if horizon == 0 || capacity < horizon {
            return Err(Error::config("replay capacity must hold at least one episode"));
        }
        Ok(Self {
            entries: VecDeque::new(),
            capacity,
            horizon,
        })
    }

    pub fn push(&mut self, entry: ReplayEntry) -> Result<()> {
        if entry.history.len() != self.horizon || entry.actions.len() != self.horizon {
            return Err(Error::contract(format!(
                "replay entry has {} steps, expected {}",
                entry.history.len(),
                self.horizon
            )));
        }
        while (self.entries.len() + 1) * self.horizon > self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.entries.len() * self.horizon
    }

    pub fn entry(&self, i: usize) -> &ReplayEntry {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ReplayEntry {
        &mut self.entries[i]
    }

    /// Up to `n` distinct transitions, uniformly.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Transition> {
        let total = self.transitions();
        index::sample(rng, total, n.min(total))
            .into_iter()
            .map(|k| Transition {
                entry: k / self.horizon,
                t: k % self.horizon,
            })
            .collect()
    }
}
