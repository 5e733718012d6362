use crate::dists::{IsotropicGaussian, Prior, PriorBlock};
use crate::env::{DesignSpace, LikelihoodModel};
use crate::error::{Error, Result};
use crate::math::LN_2PI;
use crate::rng::Rng;

/// Total intensity `b + Σ_i 1 / (m + ‖θ_i − d‖²)`; `theta` holds the source
/// coordinates back to back.
pub fn signal_intensity(theta: &[f64], d: &[f64], b: f64, m: f64) -> f64 {
    let k = d.len();
    b + theta
        .chunks_exact(k)
        .map(|src| {
            let sq: f64 = src.iter().zip(d).map(|(s, x)| (s - x) * (s - x)).sum();
            1.0 / (m + sq)
        })
        .sum::<f64>()
}

/// Sources at `θ_i ~ N(0, I_k)`; the observation is `log y ~ N(log μ, σ)`.
#[derive(Clone, Debug)]
pub struct SourceLocationTask {
    pub n_sources: usize,
    pub k: usize,
    pub b: f64,
    pub m: f64,
    pub sigma: f64,
    prior: Prior,
    design: DesignSpace,
}

impl Default for SourceLocationTask {
    fn default() -> Self {
        Self::new(2, 2, 0.1, 1e-4, 0.5, 4.0).expect("default parameters are valid")
    }
}

impl SourceLocationTask {
    pub fn new(n_sources: usize, k: usize, b: f64, m: f64, sigma: f64, bound: f64) -> Result<Self> {
        if n_sources == 0 || k == 0 {
            return Err(Error::config("source location needs at least one source and dimension"));
        }
        if !(b > 0.0 && m > 0.0 && sigma > 0.0 && bound > 0.0) {
            return Err(Error::config("source location b, m, sigma and bound must be positive"));
        }
        Ok(Self {
            n_sources,
            k,
            b,
            m,
            sigma,
            prior: Prior::new(vec![PriorBlock::Gaussian(IsotropicGaussian::standard(n_sources * k)?)]),
            design: DesignSpace::Box {
                lo: vec![-bound; k],
                hi: vec![bound; k],
            },
        })
    }

    pub fn intensity(&self, theta: &[f64], d: &[f64]) -> f64 {
        signal_intensity(theta, d, self.b, self.m)
    }
}

impl LikelihoodModel for SourceLocationTask {
    fn name(&self) -> &'static str {
        "source_location"
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

    /// Returns the observed log-intensity.
    fn simulate(&self, theta: &[f64], d: &[f64], rng: &mut Rng) -> Vec<f64> {
        vec![self.intensity(theta, d).ln() + self.sigma * rng.standard_normal()]
    }

    fn log_lik(&self, y: &[f64], theta: &[f64], d: &[f64]) -> f64 {
        let z = (y[0] - self.intensity(theta, d).ln()) / self.sigma;
        -0.5 * (z * z + LN_2PI) - self.sigma.ln()
    }

    fn feature_dim(&self) -> usize {
        self.k + 1
    }

    fn features(&self, d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        if let DesignSpace::Box { hi, .. } = &self.design {
            out.extend(d.iter().zip(hi).map(|(x, h)| x / h));
        }
        out.push(y[0] / 5.0);
    }
}
