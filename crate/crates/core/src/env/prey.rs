use crate::dists::{Binomial, LogNormal, Prior, PriorBlock, Sample};
use crate::env::{DesignSpace, LikelihoodModel};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreySolution {
    pub survivors: f64,
    /// A solver step went negative and was clamped to zero.
    pub clamped: bool,
}

/// Survivors after `duration` hours of `dN/dτ = −aN² / (1 + a·T_h·N²)`,
/// classical RK4 with `steps` fixed steps.
pub fn prey_survivors(a: f64, handling: f64, n0: f64, duration: f64, steps: usize) -> PreySolution {
    let f = |n: f64| {
        let an2 = a * n * n;
        -an2 / (1.0 + handling * an2)
    };
    let h = duration / steps as f64;
    let mut n = n0;
    let mut clamped = false;
    for _ in 0..steps {
        let k1 = f(n);
        let k2 = f(n + 0.5 * h * k1);
        let k3 = f(n + 0.5 * h * k2);
        let k4 = f(n + h * k3);
        n += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(n >= 0.0) {
            n = 0.0;
            clamped = true;
        }
    }
    PreySolution { survivors: n, clamped }
}

/// Initial prey population `d ∈ {1..300}`; outcome is the number eaten.
/// `θ = (a, T_h)`, both log-normal.
#[derive(Clone, Debug)]
pub struct PreyPopulationTask {
    pub duration: f64,
    pub steps: usize,
    prior: Prior,
    design: DesignSpace,
}

impl Default for PreyPopulationTask {
    fn default() -> Self {
        Self::new(24.0, 200, 300).expect("default parameters are valid")
    }
}

impl PreyPopulationTask {
    pub fn new(duration: f64, steps: usize, max_population: i64) -> Result<Self> {
        if !(duration > 0.0) || steps == 0 || max_population < 1 {
            return Err(Error::config("prey duration, steps and population bound must be positive"));
        }
        Ok(Self {
            duration,
            steps,
            prior: Prior::new(vec![PriorBlock::LogNormal {
                dist: LogNormal::new(-1.4, 1.35)?,
                dim: 2,
            }]),
            design: DesignSpace::Discrete {
                lo: 1,
                hi: max_population,
            },
        })
    }

    /// Replace the prior: `log a, log T_h ~ N(μ, σ)` independently.
    pub fn with_prior(mut self, log_mu: f64, log_sigma: f64) -> Result<Self> {
        self.prior = Prior::new(vec![PriorBlock::LogNormal {
            dist: LogNormal::new(log_mu, log_sigma)?,
            dim: 2,
        }]);
        Ok(self)
    }

    /// Probability that an individual is eaten.
    pub fn kill_probability(&self, theta: &[f64], d: f64) -> f64 {
        let sol = prey_survivors(theta[0], theta[1], d, self.duration, self.steps);
        ((d - sol.survivors) / d).clamp(0.0, 1.0)
    }

    fn max_population(&self) -> f64 {
        match self.design {
            DesignSpace::Discrete { hi, .. } => hi as f64,
            DesignSpace::Box { .. } => unreachable!(),
        }
    }
}

impl LikelihoodModel for PreyPopulationTask {
    fn name(&self) -> &'static str {
        "prey_population"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn design_space(&self) -> &DesignSpace {
        &self.design
    }

    fn outcome_dim(&self) -> usize {
        1
    }

    fn simulate(&self, theta: &[f64], d: &[f64], rng: &mut Rng) -> Vec<f64> {
        let p = self.kill_probability(theta, d[0]);
        let b = Binomial::new(d[0] as u64, p).expect("probability clamped to [0, 1]");
        vec![b.sample(rng) as f64]
    }

    fn log_lik(&self, y: &[f64], theta: &[f64], d: &[f64]) -> f64 {
        let p = self.kill_probability(theta, d[0]);
        Binomial { count: d[0] as u64, p }.log_prob(y[0] as u64)
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        let max = self.max_population();
        out.push(d[0] / max);
        out.push(y[0] / max);
        out.push(y[0] / d[0]);
    }
}
