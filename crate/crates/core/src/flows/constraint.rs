use crate::dists::{Prior, Support};
use crate::flows::SimplexBijector;
use crate::grad::{sigmoid, softplus};
use crate::math::logit;

/// Elementwise (or stick-breaking) map from unconstrained flow coordinates
/// to one latent block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintMap {
    Identity,
    Exp,
    Sigmoid,
    Simplex(SimplexBijector),
}

impl ConstraintMap {
    pub fn for_support(support: Support, dim: usize) -> Self {
        match support {
            Support::Real => ConstraintMap::Identity,
            Support::Positive => ConstraintMap::Exp,
            Support::UnitInterval => ConstraintMap::Sigmoid,
            Support::Simplex => ConstraintMap::Simplex(SimplexBijector::new(dim + 1)),
        }
    }

    /// Appends `θ` and returns `log |det ∂θ/∂x|`.
    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) -> f64 {
        match self {
            ConstraintMap::Identity => {
                out.extend_from_slice(x);
                0.0
            }
            ConstraintMap::Exp => {
                out.extend(x.iter().map(|v| v.exp()));
                x.iter().sum()
            }
            ConstraintMap::Sigmoid => {
                out.extend(x.iter().map(|&v| sigmoid(v)));
                x.iter().map(|&v| -softplus(v) - softplus(-v)).sum()
            }
            ConstraintMap::Simplex(s) => {
                let (t, ld) = s.forward(x);
                out.extend(t);
                ld
            }
        }
    }

    /// Appends `x` and returns `log |det ∂θ/∂x|` at it, or `None` if `θ`
    /// lies outside the support.
    pub fn inverse(&self, theta: &[f64], out: &mut Vec<f64>) -> Option<f64> {
        let start = out.len();
        match self {
            ConstraintMap::Identity => {
                if theta.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                out.extend_from_slice(theta);
            }
            ConstraintMap::Exp => {
                if theta.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return None;
                }
                out.extend(theta.iter().map(|v| v.ln()));
            }
            ConstraintMap::Sigmoid => {
                if theta.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                    return None;
                }
                out.extend(theta.iter().map(|&v| logit(v)));
            }
            ConstraintMap::Simplex(s) => {
                if theta.iter().any(|&v| !(v > 0.0)) || !(theta.iter().sum::<f64>() < 1.0) {
                    return None;
                }
                out.extend(s.inverse(theta).0);
            }
        }
        let x = out[start..].to_vec();
        let mut scratch = Vec::with_capacity(x.len());
        let ld = self.forward(&x, &mut scratch);
        ld.is_finite().then_some(ld)
    }
}

/// Constraint maps for every block of a prior, in `θ` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    blocks: Vec<(usize, usize, ConstraintMap)>,
    dim: usize,
}

impl LatentMap {
    pub fn from_prior(prior: &Prior) -> Self {
        let blocks = prior
            .layout()
            .map(|(o, b)| (o, b.dim(), ConstraintMap::for_support(b.support(), b.dim())))
            .collect();
        Self { blocks, dim: prior.dim() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[(usize, usize, ConstraintMap)] {
        &self.blocks
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut out = Vec::with_capacity(self.dim);
        let mut ld = 0.0;
        for &(o, n, m) in &self.blocks {
            ld += m.forward(&x[o..o + n], &mut out);
        }
        (out, ld)
    }

    /// `None` when `θ` is outside the support.
    pub fn inverse(&self, theta: &[f64]) -> Option<(Vec<f64>, f64)> {
        if theta.len() != self.dim {
            return None;
        }
        let mut out = Vec::with_capacity(self.dim);
        let mut ld = 0.0;
        for &(o, n, m) in &self.blocks {
            ld += m.inverse(&theta[o..o + n], &mut out)?;
        }
        Some((out, ld))
    }
}
