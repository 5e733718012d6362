use crate::dists::{Beta, Dirichlet, LogNormal, Normal, Prior, PriorBlock};
use crate::env::{DesignSpace, LikelihoodModel};
use crate::error::{Error, Result};
use crate::grad::sigmoid;
use crate::math::{log_ndtr, logit};
use crate::rng::Rng;

/// Constant-elasticity utility `(Σ x_i^ρ α_i)^{1/ρ}`.
pub fn ces_utility(x: &[f64], rho: f64, alpha: &[f64]) -> Result<f64> {
    if rho == 0.0 {
        return Err(Error::config("ces utility is undefined at rho = 0"));
    }
    let s: f64 = x.iter().zip(alpha).map(|(xi, a)| xi.powf(rho) * a).sum();
    Ok(s.powf(1.0 / rho))
}

/// Two baskets `d = (x, x′)` rated on `[ε, 1 − ε]`. `θ = (ρ, α_1..α_{k−1}, u)`.
#[derive(Clone, Debug)]
pub struct CesTask {
    pub k: usize,
    pub tau: f64,
    pub eps: f64,
    prior: Prior,
    design: DesignSpace,
}

impl Default for CesTask {
    fn default() -> Self {
        Self::new(3, 0.005, 2f64.powi(-22), 100.0).expect("default parameters are valid")
    }
}

impl CesTask {
    pub fn new(k: usize, tau: f64, eps: f64, max_amount: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("ces needs at least two goods"));
        }
        if !(tau > 0.0 && eps > 0.0 && eps < 0.5 && max_amount > 0.0) {
            return Err(Error::config("ces tau, eps and amount bound are out of range"));
        }
        Ok(Self {
            k,
            tau,
            eps,
            prior: Prior::new(vec![
                PriorBlock::Beta(Beta::new(1.0, 1.0)?),
                PriorBlock::Dirichlet(Dirichlet::new(vec![1.0; k])?),
                PriorBlock::LogNormal {
                    dist: LogNormal::new(1.0, 3.0)?,
                    dim: 1,
                },
            ]),
            design: DesignSpace::Box {
                lo: vec![0.0; 2 * k],
                hi: vec![max_amount; 2 * k],
            },
        })
    }

    /// Replace the prior: `ρ ~ Beta(a, b)`, `α ~ Dirichlet(c·1_k)`,
    /// `log u ~ N(μ, σ)`.
    pub fn with_prior(mut self, rho: (f64, f64), alpha_concentration: f64, log_u: (f64, f64)) -> Result<Self> {
        self.prior = Prior::new(vec![
            PriorBlock::Beta(Beta::new(rho.0, rho.1)?),
            PriorBlock::Dirichlet(Dirichlet::new(vec![alpha_concentration; self.k])?),
            PriorBlock::LogNormal {
                dist: LogNormal::new(log_u.0, log_u.1)?,
                dim: 1,
            },
        ]);
        Ok(self)
    }

    fn unpack(&self, theta: &[f64]) -> (f64, Vec<f64>, f64) {
        let rho = theta[0];
        let mut alpha = theta[1..self.k].to_vec();
        alpha.push(1.0 - alpha.iter().sum::<f64>());
        (rho, alpha, theta[self.k])
    }

    /// `(μ_η, σ_η)` of the latent rating.
    pub fn eta_params(&self, theta: &[f64], d: &[f64]) -> Result<(f64, f64)> {
        let (rho, alpha, u) = self.unpack(theta);
        let (x, xp) = d.split_at(self.k);
        let mu = (ces_utility(x, rho, &alpha)? - ces_utility(xp, rho, &alpha)?) * u;
        let dist: f64 = x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok((mu, (1.0 + dist) * self.tau * u))
    }
}

impl LikelihoodModel for CesTask {
    fn name(&self) -> &'static str {
        "ces"
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
        // ρ = 0 has prior measure zero; nudge it rather than abort a rollout
        let mut th = theta.to_vec();
        if th[0] == 0.0 {
            th[0] = f64::MIN_POSITIVE;
        }
        let (mu, sd) = self.eta_params(&th, d).expect("rho is nonzero");
        let eta = mu + sd * rng.standard_normal();
        vec![sigmoid(eta).clamp(self.eps, 1.0 - self.eps)]
    }

    /// Logit-normal density in the interior, censored mass at the clip points.
    fn log_lik(&self, y: &[f64], theta: &[f64], d: &[f64]) -> f64 {
        let Ok((mu, sd)) = self.eta_params(theta, d) else {
            return f64::NEG_INFINITY;
        };
        let y = y[0];
        if y <= self.eps {
            log_ndtr((logit(self.eps) - mu) / sd)
        } else if y >= 1.0 - self.eps {
            log_ndtr((mu - logit(1.0 - self.eps)) / sd)
        } else {
            let n = Normal { mu, sd };
            n.log_prob(logit(y)) - y.ln() - (-y).ln_1p()
        }
    }

    fn feature_dim(&self) -> usize {
        2 * self.k + 2
    }

    fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        if let DesignSpace::Box { hi, .. } = &self.design {
            out.extend(d.iter().zip(hi).map(|(x, h)| 2.0 * x / h - 1.0));
        }
        let bound = logit(1.0 - self.eps);
        out.push(logit(y[0].clamp(self.eps, 1.0 - self.eps)) / bound);
        out.push(2.0 * y[0] - 1.0);
    }
}
