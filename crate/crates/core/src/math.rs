//! Scalar special functions and streaming log-space reductions.

use statrs::function::erf::erfc;

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Running `log Σ exp(x_i)` that never materialises `exp(x_i)` of large
/// arguments. Rescales whenever a new maximum arrives.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    acc: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            acc: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x.is_nan() {
            self.max = f64::NAN;
            return;
        }
        if x <= self.max {
            self.acc += (x - self.max).exp();
        } else {
            self.acc = self.acc * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    /// Combine two partial reductions.
    pub fn merge(&mut self, other: &LogSumExp) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if self.max == f64::NEG_INFINITY {
            *self = *other;
            return;
        }
        if other.max <= self.max {
            self.acc += other.acc * (other.max - self.max).exp();
        } else {
            self.acc = self.acc * (self.max - other.max).exp() + other.acc;
            self.max = other.max;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if self.max == f64::INFINITY {
            f64::INFINITY
        } else {
            self.max + self.acc.ln()
        }
    }
}

/// `log Φ(x)` for the standard normal CDF, accurate far into the lower tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 6.0 {
        // Φ(x) = 1 − Q(x), Q tiny
        -0.5 * erfc(x / std::f64::consts::SQRT_2)
    } else if x > -20.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // asymptotic series of the Mills ratio
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - 0.5 * LN_2PI - (-x).ln() + series.ln()
    }
}

/// `log φ(x)` for the standard normal density.
pub fn log_normal_pdf(x: f64) -> f64 {
    -0.5 * (x * x + LN_2PI)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 − exp(−a))` for `a > 0`.
pub fn log1mexp(a: f64) -> f64 {
    if a < std::f64::consts::LN_2 {
        (-(-a).exp_m1()).ln()
    } else {
        (-(-a).exp()).ln_1p()
    }
}

/// Mean and standard error (`sd / √n`) of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn streaming_matches_batch() {
        let xs = [3.0, -1.0, 700.0, 2.5, 699.0, f64::NEG_INFINITY];
        let mut s = LogSumExp::new();
        xs.iter().for_each(|&x| s.push(x));
        assert_relative_eq!(s.value(), crate::grad::logsumexp_slice(&xs), max_relative = 1e-14);
        let (mut a, mut b) = (LogSumExp::new(), LogSumExp::new());
        xs[..3].iter().for_each(|&x| a.push(x));
        xs[3..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_relative_eq!(a.value(), s.value(), max_relative = 1e-14);
        assert_eq!(LogSumExp::new().value(), f64::NEG_INFINITY);
    }

    #[test]
    fn log_ndtr_regions() {
        assert_relative_eq!(log_ndtr(0.0), 0.5f64.ln(), max_relative = 1e-14);
        // Φ(−1.959963984540054) = 0.025
        assert_relative_eq!(log_ndtr(-1.959963984540054), 0.025f64.ln(), max_relative = 1e-9);
        // continuity across the switch points
        for x in [-20.0, 6.0] {
            let a = log_ndtr(x - 1e-9);
            let b = log_ndtr(x + 1e-9);
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-12), "{x}: {a} {b}");
        }
        assert!(log_ndtr(-1e4).is_finite());
        assert!(log_ndtr(40.0) <= 0.0);
    }

    #[test]
    fn slope_and_stderr() {
        assert_relative_eq!(ols_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), 2.0);
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        assert_relative_eq!(se, (5.0f64 / 3.0 / 4.0).sqrt());
    }
}
