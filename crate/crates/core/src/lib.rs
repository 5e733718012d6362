//! Sequential experimental design toolkit: differentiable graph, priors and
//! likelihoods, conditional flows, information estimators and RL training.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dists;
pub mod env;
pub mod estimators;
pub mod error;
pub mod flows;
pub mod grad;
pub mod harness;
pub mod history;
pub mod math;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
pub use history::{History, HistoryBatch};
pub use rng::Rng;
