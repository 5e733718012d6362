use rayon::prelude::*;

use crate::dists::Sample;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::history::History;
use crate::rng::Rng;

/// A latent draw and the history it generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub theta: Vec<f64>,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub rollouts: Vec<Rollout>,
    pub horizon: usize,
    /// Designs the policy emitted outside the design space.
    pub clamped: usize,
}

impl RolloutSet {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Every history cut to its first `t` steps.
    pub fn truncated(&self, t: usize) -> RolloutSet {
        RolloutSet {
            rollouts: self
                .rollouts
                .iter()
                .map(|r| Rollout {
                    theta: r.theta.clone(),
                    history: r.history.truncated(t),
                })
                .collect(),
            horizon: t.min(self.horizon),
            clamped: self.clamped,
        }
    }
}

/// Maps running histories to next designs, a batch at a time.
pub trait Policy: Sync {
    /// One design per history; `rngs[i]` is rollout `i`'s private stream.
    fn designs(&self, env: &Environment, histories: &[&History], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>>;
}

/// Uniform over the design space.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn designs(&self, env: &Environment, histories: &[&History], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(rngs[..histories.len()]
            .iter_mut()
            .map(|r| env.design_space().sample_uniform(r))
            .collect())
    }
}

/// The same design every step.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn designs(&self, _env: &Environment, histories: &[&History], _rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.0.clone(); histories.len()])
    }
}

/// `n` rollouts of `policy` over the environment's horizon. Rollout `i`
/// draws everything from `rng.split(i)`, so results do not depend on batching
/// or worker count.
pub fn rollout_policy(env: &Environment, policy: &dyn Policy, rng: &Rng, n: usize) -> Result<RolloutSet> {
    let mut rngs: Vec<Rng> = (0..n).map(|i| rng.split(i as u64)).collect();
    let thetas: Vec<Vec<f64>> = rngs.iter_mut().map(|r| env.prior().sample(r)).collect();
    let mut histories = vec![History::new(); n];
    let mut clamped = 0;
    for _ in 0..env.horizon() {
        let refs: Vec<&History> = histories.iter().collect();
        let mut designs = policy.designs(env, &refs, &mut rngs)?;
        if designs.len() != n {
            return Err(Error::contract("policy returned the wrong number of designs"));
        }
        for d in &mut designs {
            if d.len() != env.design_space().dim() {
                return Err(Error::contract("policy design has the wrong dimension"));
            }
            if env.design_space().clamp(d) {
                clamped += 1;
            }
        }
        let outcomes: Vec<Vec<f64>> = thetas
            .par_iter()
            .zip(designs.par_iter())
            .zip(rngs.par_iter_mut())
            .map(|((th, d), r)| env.simulate(th, d, r))
            .collect();
        for ((h, d), y) in histories.iter_mut().zip(designs).zip(outcomes) {
            h.push(d, y);
        }
    }
    if clamped > 0 {
        log::warn!("rollout: {clamped} designs were clamped into the design space");
    }
    Ok(RolloutSet {
        rollouts: thetas
            .into_iter()
            .zip(histories)
            .map(|(theta, history)| Rollout { theta, history })
            .collect(),
        horizon: env.horizon(),
        clamped,
    })
}
