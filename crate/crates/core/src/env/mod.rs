//! Sequential-design environments: a prior over `θ`, a design space, a
//! simulator and (unless withheld) an explicit log-likelihood.

mod ces;
mod gaussian;
mod prey;
mod source;

use std::fmt;
use std::sync::Arc;

pub use ces::{ces_utility, CesTask};
pub use gaussian::ConjugateGaussianTask;
pub use prey::{prey_survivors, PreySolution, PreyPopulationTask};
pub use source::{signal_intensity, SourceLocationTask};

use crate::dists::Prior;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum DesignSpace {
    /// Axis-aligned box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Integers `lo..=hi`, stored as a one-element design vector.
    Discrete { lo: i64, hi: i64 },
}

impl DesignSpace {
    pub fn dim(&self) -> usize {
        match self {
            DesignSpace::Box { lo, .. } => lo.len(),
            DesignSpace::Discrete { .. } => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, DesignSpace::Discrete { .. })
    }

    /// Number of actions of a discrete space.
    pub fn n_actions(&self) -> Option<usize> {
        match self {
            DesignSpace::Discrete { lo, hi } => Some((hi - lo + 1) as usize),
            DesignSpace::Box { .. } => None,
        }
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        if d.len() != self.dim() {
            return false;
        }
        match self {
            DesignSpace::Box { lo, hi } => d.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| x >= l && x <= h),
            DesignSpace::Discrete { lo, hi } => d[0].fract() == 0.0 && d[0] >= *lo as f64 && d[0] <= *hi as f64,
        }
    }

    /// Project onto the space. Returns true if anything moved.
    pub fn clamp(&self, d: &mut [f64]) -> bool {
        let mut moved = false;
        match self {
            DesignSpace::Box { lo, hi } => {
                for (x, (l, h)) in d.iter_mut().zip(lo.iter().zip(hi)) {
                    let c = if x.is_nan() { 0.5 * (l + h) } else { x.clamp(*l, *h) };
                    moved |= c != *x;
                    *x = c;
                }
            }
            DesignSpace::Discrete { lo, hi } => {
                let c = if d[0].is_nan() { *lo as f64 } else { d[0].round().clamp(*lo as f64, *hi as f64) };
                moved = c != d[0];
                d[0] = c;
            }
        }
        moved
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            DesignSpace::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| rng.uniform_range(*l, *h)).collect(),
            DesignSpace::Discrete { lo, hi } => vec![(*lo + rng.below((hi - lo + 1) as usize) as i64) as f64],
        }
    }
}

/// A samplable probabilistic experiment `p(y | θ, d)` with prior `p(θ)`.
pub trait LikelihoodModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn prior(&self) -> &Prior;
    fn design_space(&self) -> &DesignSpace;
    fn outcome_dim(&self) -> usize;
    fn simulate(&self, theta: &[f64], d: &[f64], rng: &mut Rng) -> Vec<f64>;
    fn log_lik(&self, y: &[f64], theta: &[f64], d: &[f64]) -> f64;
    /// Width of [`LikelihoodModel::features`].
    fn feature_dim(&self) -> usize;
    /// Roughly unit-scale features of one `(d, y)` step for the encoders.
    fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>);
}

/// A likelihood model with a horizon and an explicit/implicit switch.
#[derive(Clone, Debug)]
pub struct Environment {
    model: Arc<dyn LikelihoodModel>,
    horizon: usize,
    explicit: bool,
}

impl Environment {
    pub fn new(model: impl LikelihoodModel + 'static, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        Ok(Self {
            model: Arc::new(model),
            horizon,
            explicit: true,
        })
    }

    /// Withhold the explicit likelihood; only simulation remains available.
    pub fn implicit(mut self) -> Self {
        self.explicit = false;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn name(&self) -> &'static str {
        self.model.name()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_explicit(&self) -> bool {
        self.explicit
    }

    pub fn model(&self) -> &dyn LikelihoodModel {
        self.model.as_ref()
    }

    pub fn prior(&self) -> &Prior {
        self.model.prior()
    }

    pub fn theta_dim(&self) -> usize {
        self.model.prior().dim()
    }

    pub fn design_space(&self) -> &DesignSpace {
        self.model.design_space()
    }

    pub fn outcome_dim(&self) -> usize {
        self.model.outcome_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.model.feature_dim()
    }

    pub fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        self.model.features(d, y, out)
    }

    pub fn simulate(&self, theta: &[f64], d: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.model.simulate(theta, d, rng)
    }

    pub fn log_lik(&self, y: &[f64], theta: &[f64], d: &[f64]) -> Result<f64> {
        self.require_explicit()?;
        Ok(self.model.log_lik(y, theta, d))
    }

    pub fn require_explicit(&self) -> Result<()> {
        if self.explicit {
            Ok(())
        } else {
            Err(Error::Capability(format!(
                "environment '{}' is configured implicit: no explicit log-likelihood",
                self.name()
            )))
        }
    }

    /// Unchecked likelihood access for callers that already verified
    /// [`Environment::require_explicit`].
    pub(crate) fn log_lik_unchecked(&self, y: &[f64], theta: &[f64], d: &[f64]) -> f64 {
        self.model.log_lik(y, theta, d)
    }
}
