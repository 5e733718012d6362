//! Monte-Carlo EIG estimators over policy rollouts.

mod proposal;
mod rollout;

pub use proposal::{AnalyticGaussianPosterior, FlowProposal, PriorProposal, Proposal};
pub use rollout::{rollout_policy, ConstantPolicy, Policy, RandomPolicy, Rollout, RolloutSet};

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::dists::Sample;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::math::{mean_stderr, LogSumExp};
use crate::rng::Rng;

/// Contrastive draws processed per pass.
pub const DEFAULT_CHUNK: usize = 10_000;

/// One estimate, serialisable as a CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub env: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub n: usize,
    pub seed: u64,
    pub value: f64,
    pub stderr: f64,
    pub excluded: usize,
    pub wall_ms: Option<f64>,
}

impl EstimateReport {
    fn from_samples(estimator: &str, env: &Environment, t: usize, l: Option<usize>, seed: u64, samples: &[f64], offset: f64) -> Self {
        let (m, se) = mean_stderr(samples);
        Self {
            estimator: estimator.into(),
            env: env.name().into(),
            t,
            l,
            n: samples.len(),
            seed,
            value: offset + m,
            stderr: se,
            excluded: 0,
            wall_ms: None,
        }
    }

    pub fn with_wall_time(mut self, start: Instant) -> Self {
        self.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        self
    }
}

fn history_log_lik(env: &Environment, r: &Rollout, theta: &[f64]) -> f64 {
    r.history
        .designs()
        .iter()
        .zip(r.history.outcomes())
        .map(|(d, y)| env.log_lik_unchecked(y, theta, d))
        .sum()
}

/// Per-rollout `(log p(h|θ0), LSE over θ_{1:L})` with fresh prior draws
/// from `rng.split(i)`, streamed in chunks.
fn contrastive_terms(rollouts: &RolloutSet, env: &Environment, l: usize, rng: &Rng, chunk: usize) -> Result<Vec<(f64, LogSumExp)>> {
    env.require_explicit()?;
    let chunk = chunk.max(1);
    Ok(rollouts
        .rollouts
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = rng.split(i as u64);
            let ll0 = history_log_lik(env, r, &r.theta);
            let mut acc = LogSumExp::new();
            let mut done = 0;
            let mut buf = Vec::with_capacity(chunk.min(l));
            while done < l {
                let m = chunk.min(l - done);
                buf.clear();
                buf.extend((0..m).map(|_| env.prior().sample(&mut rng)));
                for th in &buf {
                    acc.push(history_log_lik(env, r, th));
                }
                done += m;
            }
            (ll0, acc)
        })
        .collect())
}

/// sPCE and sNMC integrands on shared contrastive draws.
pub fn contrastive_samples(rollouts: &RolloutSet, env: &Environment, l: usize, rng: &Rng, chunk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let terms = contrastive_terms(rollouts, env, l, rng, chunk)?;
    let spce = terms
        .iter()
        .map(|(ll0, acc)| {
            let mut all = *acc;
            all.push(*ll0);
            (ll0 - all.value()).min(0.0)
        })
        .collect();
    let snmc = terms.iter().map(|(ll0, acc)| ll0 - acc.value()).collect();
    Ok((spce, snmc))
}

/// Lower bound with `θ_0` in the denominator; never exceeds `log(L + 1)`.
pub fn spce(rollouts: &RolloutSet, env: &Environment, l: usize, rng: &Rng) -> Result<EstimateReport> {
    let (s, _) = contrastive_samples(rollouts, env, l, rng, DEFAULT_CHUNK)?;
    // samples are stored without the log(L+1) offset so the mean stays ≤ 0
    Ok(EstimateReport::from_samples("spce", env, rollouts.horizon, Some(l), rng.key(), &s, ((l + 1) as f64).ln()))
}

/// Upper bound: the `θ_0` term is dropped from the denominator.
pub fn snmc(rollouts: &RolloutSet, env: &Environment, l: usize, rng: &Rng) -> Result<EstimateReport> {
    if l == 0 {
        return Err(Error::config("snmc needs at least one contrastive sample"));
    }
    let (_, s) = contrastive_samples(rollouts, env, l, rng, DEFAULT_CHUNK)?;
    Ok(EstimateReport::from_samples("snmc", env, rollouts.horizon, Some(l), rng.key(), &s, (l as f64).ln()))
}

/// sPCE and sNMC reports from one chunked pass over shared draws. The sNMC
/// report is `None` at `L = 0`.
pub fn contrastive_pair(
    rollouts: &RolloutSet,
    env: &Environment,
    l: usize,
    rng: &Rng,
    chunk: usize,
) -> Result<(EstimateReport, Option<EstimateReport>)> {
    let (s, u) = contrastive_samples(rollouts, env, l, rng, chunk)?;
    let t = rollouts.horizon;
    let lo = EstimateReport::from_samples("spce", env, t, Some(l), rng.key(), &s, ((l + 1) as f64).ln());
    let hi = (l > 0).then(|| EstimateReport::from_samples("snmc", env, t, Some(l), rng.key(), &u, (l as f64).ln()));
    Ok((lo, hi))
}

/// `log q(θ_0 | h_T)` per rollout; `−∞` marks a support violation.
pub fn cross_entropy_terms(rollouts: &RolloutSet, q: &dyn Proposal) -> Result<Vec<f64>> {
    let thetas: Vec<&[f64]> = rollouts.rollouts.iter().map(|r| r.theta.as_slice()).collect();
    let hs: Vec<&crate::History> = rollouts.rollouts.iter().map(|r| &r.history).collect();
    q.log_q(&thetas, &hs)
}

/// Cross-entropy estimate: mean of `log q(θ_0|h_T)` plus the prior entropy.
pub fn scee(rollouts: &RolloutSet, q: &dyn Proposal, prior_entropy: f64, env: &Environment, seed: u64) -> Result<EstimateReport> {
    let lq = cross_entropy_terms(rollouts, q)?;
    let kept: Vec<f64> = lq.iter().copied().filter(|v| v.is_finite()).collect();
    let mut rep = EstimateReport::from_samples("scee", env, rollouts.horizon, None, seed, &kept, prior_entropy);
    rep.excluded = lq.len() - kept.len();
    if rep.excluded > 0 {
        log::warn!("scee: {} samples outside the proposal support were excluded", rep.excluded);
    }
    Ok(rep)
}

/// Adaptive contrastive integrands with `θ_{1:L} ~ q(·|h_T)`.
pub fn sace_samples(rollouts: &RolloutSet, q: &dyn Proposal, env: &Environment, l: usize, rng: &Rng, chunk: usize) -> Result<Vec<f64>> {
    env.require_explicit()?;
    let chunk = chunk.max(1);
    let lq0 = cross_entropy_terms(rollouts, q)?;
    rollouts
        .rollouts
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = rng.split(i as u64);
            let ll0 = history_log_lik(env, r, &r.theta);
            let lp0 = env.prior().log_prob(&r.theta);
            let mut acc = LogSumExp::new();
            acc.push(ll0 + lp0 - lq0[i]);
            let mut done = 0;
            while done < l {
                let m = chunk.min(l - done);
                let draws = q.sample(&r.history, m, &mut rng)?;
                let refs: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
                let hs = vec![&r.history; m];
                let lq = q.log_q(&refs, &hs)?;
                for (th, lqi) in draws.iter().zip(lq) {
                    acc.push(history_log_lik(env, r, th) + env.prior().log_prob(th) - lqi);
                }
                done += m;
            }
            Ok(ll0 - (acc.value() - ((l + 1) as f64).ln()))
        })
        .collect()
}

pub fn sace(rollouts: &RolloutSet, q: &dyn Proposal, env: &Environment, l: usize, rng: &Rng) -> Result<EstimateReport> {
    let s = sace_samples(rollouts, q, env, l, rng, DEFAULT_CHUNK)?;
    Ok(EstimateReport::from_samples("sace", env, rollouts.horizon, Some(l), rng.key(), &s, 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub mean_abs_error: f64,
    pub mean_stderr: f64,
    /// Largest `|estimate − truth| / stderr` over repetitions.
    pub max_z: f64,
}

/// Repeat `estimate(n, rng)` `reps` times at each `n`.
pub fn convergence_sweep<F>(n_grid: &[usize], reps: usize, truth: f64, rng: &Rng, estimate: F) -> Result<Vec<SweepRow>>
where
    F: Fn(usize, &Rng) -> Result<EstimateReport>,
{
    n_grid
        .iter()
        .map(|&n| {
            let mut err = 0.0;
            let mut se = 0.0;
            let mut max_z: f64 = 0.0;
            for r in 0..reps {
                let rep = estimate(n, &rng.split(((n as u64) << 16) + r as u64))?;
                err += (rep.value - truth).abs();
                se += rep.stderr;
                max_z = max_z.max((rep.value - truth).abs() / rep.stderr);
            }
            Ok(SweepRow {
                n,
                mean_abs_error: err / reps as f64,
                mean_stderr: se / reps as f64,
                max_z,
            })
        })
        .collect()
}

/// Log-log slope of standard error against `n`.
pub fn stderr_slope(rows: &[SweepRow]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_stderr.ln()).collect();
    crate::math::ols_slope(&x, &y)
}

#[cfg(test)]
mod tests;
