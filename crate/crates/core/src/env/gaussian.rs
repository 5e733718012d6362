use crate::dists::{IsotropicGaussian, Prior, PriorBlock};
use crate::env::{DesignSpace, LikelihoodModel};
use crate::error::Result;
use crate::math::LN_2PI;
use crate::rng::Rng;

/// `θ ~ N(μ0, σ0·I_k)`, `y = θ + √σ·z`. The design is a dummy scalar.
#[derive(Clone, Debug)]
pub struct ConjugateGaussianTask {
    pub k: usize,
    pub prior_var: f64,
    pub sigma: f64,
    prior: Prior,
    gaussian: IsotropicGaussian,
    design: DesignSpace,
    feature_scale: f64,
}

impl ConjugateGaussianTask {
    pub fn new(k: usize, prior_mean: f64, prior_var: f64, sigma: f64) -> Result<Self> {
        let gaussian = IsotropicGaussian::new(vec![prior_mean; k], prior_var)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(crate::Error::config(format!("likelihood variance must be positive, got {sigma}")));
        }
        Ok(Self {
            k,
            prior_var,
            sigma,
            prior: Prior::new(vec![PriorBlock::Gaussian(gaussian.clone())]),
            gaussian,
            design: DesignSpace::Box {
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            feature_scale: 1.0 / (prior_var + sigma).sqrt(),
        })
    }

    pub fn prior_gaussian(&self) -> &IsotropicGaussian {
        &self.gaussian
    }
}

impl LikelihoodModel for ConjugateGaussianTask {
    fn name(&self) -> &'static str {
        "conjugate_gaussian"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn design_space(&self) -> &DesignSpace {
        &self.design
    }

    fn outcome_dim(&self) -> usize {
        self.k
    }

    fn simulate(&self, theta: &[f64], _d: &[f64], rng: &mut Rng) -> Vec<f64> {
        let sd = self.sigma.sqrt();
        theta.iter().map(|t| t + sd * rng.standard_normal()).collect()
    }

    fn log_lik(&self, y: &[f64], theta: &[f64], _d: &[f64]) -> f64 {
        let sq: f64 = y.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * (sq / self.sigma + self.k as f64 * (LN_2PI + self.sigma.ln()))
    }

    fn feature_dim(&self) -> usize {
        self.k + 1
    }

    fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        out.push(d[0]);
        let m = self.gaussian.mean();
        out.extend(y.iter().zip(m).map(|(v, mu)| (v - mu) * self.feature_scale));
    }
}
