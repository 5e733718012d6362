use crate::grad::sigmoid;
use crate::math::logit;

/// Stick-breaking map from `R^{k−1}` onto the reduced open simplex, with the
/// `1/(1 − ε)` rescaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexBijector {
    pub k: usize,
    pub eps: f64,
}

impl SimplexBijector {
    pub fn new(k: usize) -> Self {
        Self { k, eps: f64::EPSILON }
    }

    /// `u ↦ θ` and `log |det ∂θ/∂u|`.
    pub fn forward(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut theta = Vec::with_capacity(u.len());
        let mut used = 0.0f64;
        let mut log_det = (1.0 - self.k as f64) * (1.0 - self.eps).ln();
        for &ui in u {
            let v = sigmoid(ui);
            let rest = 1.0 - used;
            // log v(1 − v) = −softplus(u) − softplus(−u)
            log_det += -crate::grad::softplus(ui) - crate::grad::softplus(-ui) + rest.ln();
            let w = v * rest;
            used += w;
            theta.push(w / (1.0 - self.eps));
        }
        (theta, log_det)
    }

    /// `θ ↦ u`. Logit arguments at or beyond the boundary are clamped into
    /// `[ε, 1 − ε]`; the flag reports whether that happened.
    pub fn inverse(&self, theta: &[f64]) -> (Vec<f64>, bool) {
        let mut used = 0.0f64;
        let mut clamped = false;
        let u = theta
            .iter()
            .map(|&t| {
                let w = (1.0 - self.eps) * t;
                let mut arg = w / (1.0 - used);
                used += w;
                if !(arg >= self.eps && arg <= 1.0 - self.eps) {
                    clamped = true;
                    arg = if arg.is_nan() { 0.5 } else { arg.clamp(self.eps, 1.0 - self.eps) };
                }
                logit(arg)
            })
            .collect();
        (u, clamped)
    }
}
