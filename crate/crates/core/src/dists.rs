//! Parametric distributions, the block-structured priors used by every
//! environment, and closed-form Gaussian conjugate results.

use rand_distr::Distribution as _;

use crate::error::{Error, Result};
use crate::math::{digamma, ln_gamma, LN_2PI};
use crate::rng::Rng;

/// Anything that can be drawn from.
pub trait Sample {
    type Value;

    fn sample(&self, rng: &mut Rng) -> Self::Value;

    fn sample_n(&self, rng: &mut Rng, n: usize) -> Vec<Self::Value> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {x}")))
    }
}

/// `N(μ0, σ0·I_k)`; `var` is the per-dimension variance.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicGaussian {
    mean: Vec<f64>,
    var: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        check_positive("gaussian variance", var)?;
        if mean.is_empty() {
            return Err(Error::config("gaussian dimension must be at least 1"));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(k: usize) -> Result<Self> {
        Self::new(vec![0.0; k], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let k = self.dim() as f64;
        -0.5 * (sq / self.var + k * (LN_2PI + self.var.ln()))
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(self.dim(), self.var).expect("validated variance")
    }
}

impl Sample for IsotropicGaussian {
    type Value = Vec<f64>;

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let sd = self.var.sqrt();
        self.mean.iter().map(|m| m + sd * rng.standard_normal()).collect()
    }
}

/// Differential entropy of `N(·, σ0·I_k)`.
pub fn gaussian_entropy(k: usize, var: f64) -> Result<f64> {
    check_positive("gaussian variance", var)?;
    let k = k as f64;
    Ok(0.5 * k * (1.0 + LN_2PI + var.ln()))
}

/// Exact posterior of the conjugate model `y_i ~ N(θ, σ·I)`, `θ ~ prior`.
pub fn conjugate_posterior(prior: &IsotropicGaussian, sigma: f64, observations: &[Vec<f64>]) -> Result<IsotropicGaussian> {
    check_positive("likelihood variance", sigma)?;
    if observations.is_empty() {
        return Ok(prior.clone());
    }
    let k = prior.dim();
    let mut sum = vec![0.0; k];
    for y in observations {
        if y.len() != k {
            return Err(Error::config(format!("observation has dimension {}, expected {k}", y.len())));
        }
        sum.iter_mut().zip(y).for_each(|(s, v)| *s += v);
    }
    let n = observations.len() as f64;
    let precision = 1.0 / prior.var + n / sigma;
    let var = 1.0 / precision;
    let mean = prior
        .mean
        .iter()
        .zip(&sum)
        .map(|(m, s)| var * (m / prior.var + s / sigma))
        .collect();
    IsotropicGaussian::new(mean, var)
}

/// EIG of any policy after `n` experiments on the conjugate model.
pub fn closed_form_eig(k: usize, prior_var: f64, sigma: f64, n: usize) -> f64 {
    0.5 * k as f64 * (n as f64 * prior_var / sigma).ln_1p()
}

/// `KL(p ‖ q)` between isotropic Gaussians.
pub fn gaussian_kl(p: &IsotropicGaussian, q: &IsotropicGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::config(format!("kl: dimensions {} and {}", p.dim(), q.dim())));
    }
    let k = p.dim() as f64;
    let sq: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let r = p.var / q.var;
    Ok(0.5 * (k * r + sq / q.var - k + k * (q.var / p.var).ln()))
}

/// Scalar normal with mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normal {
    pub mu: f64,
    pub sd: f64,
}

impl Normal {
    pub fn new(mu: f64, sd: f64) -> Result<Self> {
        check_positive("normal sd", sd)?;
        Ok(Self { mu, sd })
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sd;
        -0.5 * (z * z + LN_2PI) - self.sd.ln()
    }

    pub fn entropy(&self) -> f64 {
        0.5 * (1.0 + LN_2PI) + self.sd.ln()
    }
}

impl Sample for Normal {
    type Value = f64;

    fn sample(&self, rng: &mut Rng) -> f64 {
        self.mu + self.sd * rng.standard_normal()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beta {
    pub a: f64,
    pub b: f64,
}

impl Beta {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        check_positive("beta a", a)?;
        check_positive("beta b", b)?;
        Ok(Self { a, b })
    }

    fn ln_beta(&self) -> f64 {
        ln_gamma(self.a) + ln_gamma(self.b) - ln_gamma(self.a + self.b)
    }

    /// `−∞` outside `(0, 1)`.
    pub fn log_prob(&self, x: f64) -> f64 {
        if !(x > 0.0 && x < 1.0) {
            return f64::NEG_INFINITY;
        }
        (self.a - 1.0) * x.ln() + (self.b - 1.0) * (-x).ln_1p() - self.ln_beta()
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn entropy(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        self.ln_beta() - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
    }
}

impl Sample for Beta {
    type Value = f64;

    fn sample(&self, rng: &mut Rng) -> f64 {
        rand_distr::Beta::new(self.a, self.b).expect("validated").sample(rng)
    }
}

/// Dirichlet over the `k`-simplex. Densities are evaluated on the first
/// `k − 1` coordinates, the last one being implied.
#[derive(Clone, Debug, PartialEq)]
pub struct Dirichlet {
    alpha: Vec<f64>,
}

impl Dirichlet {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::config("dirichlet needs at least two components"));
        }
        for &a in &alpha {
            check_positive("dirichlet concentration", a)?;
        }
        Ok(Self { alpha })
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn ln_norm(&self) -> f64 {
        self.alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(self.alpha.iter().sum())
    }

    /// Log-density at the reduced point `x[..k−1]`; `−∞` off the open simplex.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        if x.len() != self.k() - 1 {
            return f64::NEG_INFINITY;
        }
        let last = 1.0 - x.iter().sum::<f64>();
        if x.iter().any(|&v| !(v > 0.0)) || !(last > 0.0) {
            return f64::NEG_INFINITY;
        }
        let body: f64 = x
            .iter()
            .chain(std::iter::once(&last))
            .zip(&self.alpha)
            .map(|(v, a)| (a - 1.0) * v.ln())
            .sum();
        body - self.ln_norm()
    }

    pub fn entropy(&self) -> f64 {
        let a0: f64 = self.alpha.iter().sum();
        let k = self.k() as f64;
        self.ln_norm() + (a0 - k) * digamma(a0) - self.alpha.iter().map(|&a| (a - 1.0) * digamma(a)).sum::<f64>()
    }
}

impl Sample for Dirichlet {
    /// All `k` components.
    type Value = Vec<f64>;

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let g: Vec<f64> = self
            .alpha
            .iter()
            .map(|&a| rand_distr::Gamma::new(a, 1.0).expect("validated").sample(rng).max(f64::MIN_POSITIVE))
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// `log X ~ N(μ, σ)` with `σ` a standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        check_positive("lognormal sigma", sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        let lx = x.ln();
        let z = (lx - self.mu) / self.sigma;
        -0.5 * (z * z + LN_2PI) - self.sigma.ln() - lx
    }

    pub fn entropy(&self) -> f64 {
        self.mu + 0.5 * (1.0 + LN_2PI) + self.sigma.ln()
    }
}

impl Sample for LogNormal {
    type Value = f64;

    fn sample(&self, rng: &mut Rng) -> f64 {
        (self.mu + self.sigma * rng.standard_normal()).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Binomial {
    pub count: u64,
    pub p: f64,
}

impl Binomial {
    pub fn new(count: u64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("binomial p must lie in [0, 1], got {p}")));
        }
        Ok(Self { count, p })
    }

    pub fn log_prob(&self, y: u64) -> f64 {
        if y > self.count {
            return f64::NEG_INFINITY;
        }
        let (n, y_f) = (self.count as f64, y as f64);
        let choose = ln_gamma(n + 1.0) - ln_gamma(y_f + 1.0) - ln_gamma(n - y_f + 1.0);
        let term = |k: f64, q: f64| if k == 0.0 { 0.0 } else { k * q.ln() };
        choose + term(y_f, self.p) + term(n - y_f, 1.0 - self.p)
    }
}

impl Sample for Binomial {
    type Value = u64;

    fn sample(&self, rng: &mut Rng) -> u64 {
        rand_distr::Binomial::new(self.count, self.p).expect("validated").sample(rng)
    }
}

/// How a prior block's support relates to the real line; the flow models
/// each block in unconstrained coordinates and maps through this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
    UnitInterval,
    /// Reduced simplex coordinates (`k − 1` of them).
    Simplex,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorBlock {
    Gaussian(IsotropicGaussian),
    /// `dim` independent copies.
    LogNormal { dist: LogNormal, dim: usize },
    Beta(Beta),
    Dirichlet(Dirichlet),
}

impl PriorBlock {
    pub fn dim(&self) -> usize {
        match self {
            PriorBlock::Gaussian(g) => g.dim(),
            PriorBlock::LogNormal { dim, .. } => *dim,
            PriorBlock::Beta(_) => 1,
            PriorBlock::Dirichlet(d) => d.k() - 1,
        }
    }

    pub fn support(&self) -> Support {
        match self {
            PriorBlock::Gaussian(_) => Support::Real,
            PriorBlock::LogNormal { .. } => Support::Positive,
            PriorBlock::Beta(_) => Support::UnitInterval,
            PriorBlock::Dirichlet(_) => Support::Simplex,
        }
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut Vec<f64>) {
        match self {
            PriorBlock::Gaussian(g) => out.extend(g.sample(rng)),
            PriorBlock::LogNormal { dist, dim } => out.extend((0..*dim).map(|_| dist.sample(rng))),
            PriorBlock::Beta(b) => out.push(b.sample(rng)),
            PriorBlock::Dirichlet(d) => {
                let s = d.sample(rng);
                out.extend_from_slice(&s[..s.len() - 1]);
            }
        }
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        match self {
            PriorBlock::Gaussian(g) => g.log_prob(x),
            PriorBlock::LogNormal { dist, .. } => x.iter().map(|&v| dist.log_prob(v)).sum(),
            PriorBlock::Beta(b) => b.log_prob(x[0]),
            PriorBlock::Dirichlet(d) => d.log_prob(x),
        }
    }

    fn entropy(&self) -> f64 {
        match self {
            PriorBlock::Gaussian(g) => g.entropy(),
            PriorBlock::LogNormal { dist, dim } => *dim as f64 * dist.entropy(),
            PriorBlock::Beta(b) => b.entropy(),
            PriorBlock::Dirichlet(d) => d.entropy(),
        }
    }
}

/// Product of independent blocks laid out contiguously in `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    blocks: Vec<PriorBlock>,
}

impl Prior {
    pub fn new(blocks: Vec<PriorBlock>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[PriorBlock] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(PriorBlock::dim).sum()
    }

    /// `(offset, block)` pairs.
    pub fn layout(&self) -> impl Iterator<Item = (usize, &PriorBlock)> {
        self.blocks.iter().scan(0, |off, b| {
            let start = *off;
            *off += b.dim();
            Some((start, b))
        })
    }

    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        self.layout().map(|(o, b)| b.log_prob(&theta[o..o + b.dim()])).sum()
    }

    /// Sum of the blocks' analytic entropies.
    pub fn entropy(&self) -> f64 {
        self.blocks.iter().map(PriorBlock::entropy).sum()
    }
}

impl Sample for Prior {
    type Value = Vec<f64>;

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            b.sample_into(rng, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degenerate_binomial() {
        let mut rng = Rng::new(0);
        let b = Binomial::new(10, 0.0).unwrap();
        assert!(b.sample_n(&mut rng, 100).iter().all(|&y| y == 0));
        assert_eq!(b.log_prob(0), 0.0);
        assert_eq!(b.log_prob(1), f64::NEG_INFINITY);
        assert_relative_eq!(Binomial::new(2, 0.5).unwrap().log_prob(1), 0.5f64.ln(), max_relative = 1e-14);
        assert!(Binomial::new(3, 1.5).is_err());
    }

    #[test]
    fn dirichlet_on_simplex() {
        let mut rng = Rng::new(1);
        let d = Dirichlet::new(vec![1.0, 1.0, 1.0]).unwrap();
        for s in d.sample_n(&mut rng, 1000) {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&v| v > 0.0));
        }
        // flat Dirichlet(1,1,1) has density Γ(3) = 2 on the reduced simplex
        assert_relative_eq!(d.log_prob(&[0.2, 0.3]), 2f64.ln(), max_relative = 1e-12);
        assert_eq!(d.log_prob(&[0.7, 0.4]), f64::NEG_INFINITY);
        assert_relative_eq!(d.entropy(), -(2f64.ln()), max_relative = 1e-12);
    }

    #[test]
    fn beta_mean() {
        let mut rng = Rng::new(2);
        let b = Beta::new(1.0, 1.0).unwrap();
        let m = b.sample_n(&mut rng, 100_000).iter().sum::<f64>() / 1e5;
        assert!((m - 0.5).abs() < 0.01);
        assert_relative_eq!(b.entropy(), 0.0, epsilon = 1e-12);
        assert_eq!(b.log_prob(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn standard_normal_log_density() {
        let g = IsotropicGaussian::standard(1).unwrap();
        assert_relative_eq!(g.log_prob(&[0.0]), -0.9189385332046727, max_relative = 1e-14);
        assert_relative_eq!(Normal::new(0.0, 1.0).unwrap().log_prob(0.0), -0.9189385332046727);
    }

    #[test]
    fn lognormal_density_is_cdf_derivative() {
        let d = LogNormal::new(1.0, 3.0).unwrap();
        let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-(x.ln() - 1.0) / (3.0 * std::f64::consts::SQRT_2));
        let e = std::f64::consts::E;
        let h = 1e-5;
        let numeric = (cdf(e + h) - cdf(e - h)) / (2.0 * h);
        assert_relative_eq!(d.log_prob(e).exp(), numeric, max_relative = 1e-7);
    }

    #[test]
    fn gaussian_quadrature_normalisation() {
        let g = IsotropicGaussian::new(vec![0.3], 0.7).unwrap();
        let h = 1e-3;
        let total: f64 = (-20_000..=20_000).map(|i| g.log_prob(&[i as f64 * h]).exp() * h).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn entropies() {
        assert_relative_eq!(gaussian_entropy(1, 1.0).unwrap(), 1.4189385332046727, max_relative = 1e-14);
        assert_relative_eq!(gaussian_entropy(2, 1.0).unwrap(), 2.0 * 1.4189385332046727, max_relative = 1e-14);
        assert!(gaussian_entropy(3, 0.0).is_err());
        // MC oracle
        let g = IsotropicGaussian::new(vec![0.0; 10], 0.5).unwrap();
        let mut rng = Rng::new(3);
        let mc = -(0..1_000_000).map(|_| g.log_prob(&g.sample(&mut rng))).sum::<f64>() / 1e6;
        assert!((mc - g.entropy()).abs() < 0.01, "{mc} vs {}", g.entropy());
    }

    #[test]
    fn conjugate_updates() {
        let prior = IsotropicGaussian::new(vec![0.0; 10], 2.0).unwrap();
        assert_eq!(conjugate_posterior(&prior, 1.0, &[]).unwrap(), prior);
        let one = IsotropicGaussian::standard(1).unwrap();
        assert_relative_eq!(conjugate_posterior(&one, 1.0, &[vec![1.0]]).unwrap().var(), 0.5);
        let mut rng = Rng::new(4);
        let obs: Vec<Vec<f64>> = (0..10).map(|_| prior.sample(&mut rng)).collect();
        let post = conjugate_posterior(&prior, 1.0, &obs).unwrap();
        assert_relative_eq!(post.var(), 1.0 / 10.5, max_relative = 1e-14);
        // sequential equals batch
        let mut seq = prior.clone();
        for y in &obs {
            seq = conjugate_posterior(&seq, 1.0, std::slice::from_ref(y)).unwrap();
        }
        assert!((seq.var() - post.var()).abs() < 1e-12);
        for (a, b) in seq.mean().iter().zip(post.mean()) {
            assert!((a - b).abs() < 1e-12);
        }
        // entropy drop equals the closed-form EIG
        let drop = prior.entropy() - post.entropy();
        assert!((drop - closed_form_eig(10, 2.0, 1.0, 10)).abs() < 1e-12);
        assert!(conjugate_posterior(&prior, 1.0, &[vec![1.0]]).is_err());
    }

    #[test]
    fn eig_table_values_and_monotonicity() {
        assert_relative_eq!(closed_form_eig(10, 0.5, 5.0, 10), 3.4657, epsilon = 1e-4);
        assert_relative_eq!(closed_form_eig(20, 4.0, 0.5, 10), 43.944, epsilon = 1e-3);
        assert_eq!(closed_form_eig(5, 1.0, 1.0, 0), 0.0);
        let base = closed_form_eig(4, 1.0, 1.0, 3);
        assert!(closed_form_eig(4, 1.0, 1.0, 4) > base);
        assert!(closed_form_eig(4, 1.5, 1.0, 3) > base);
        assert!(closed_form_eig(4, 1.0, 1.5, 3) < base);
    }

    #[test]
    fn kl_cases() {
        let p = IsotropicGaussian::new(vec![0.0], 1.0).unwrap();
        let q = IsotropicGaussian::new(vec![0.0], 2.0).unwrap();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        assert_relative_eq!(gaussian_kl(&p, &q).unwrap(), 0.5 * (0.5 + 2f64.ln() - 1.0), max_relative = 1e-14);
        let p = IsotropicGaussian::new(vec![0.3, -1.0], 0.7).unwrap();
        let q = IsotropicGaussian::new(vec![-0.2, 0.4], 1.9).unwrap();
        let mut rng = Rng::new(5);
        let mc = (0..1_000_000)
            .map(|_| {
                let x = p.sample(&mut rng);
                p.log_prob(&x) - q.log_prob(&x)
            })
            .sum::<f64>()
            / 1e6;
        assert!((mc - gaussian_kl(&p, &q).unwrap()).abs() < 0.01);
        assert!(gaussian_kl(&p, &IsotropicGaussian::standard(3).unwrap()).is_err());
    }

    #[test]
    fn prior_blocks_compose() {
        let prior = Prior::new(vec![
            PriorBlock::Beta(Beta::new(1.0, 1.0).unwrap()),
            PriorBlock::Dirichlet(Dirichlet::new(vec![1.0; 3]).unwrap()),
            PriorBlock::LogNormal {
                dist: LogNormal::new(1.0, 3.0).unwrap(),
                dim: 1,
            },
        ]);
        assert_eq!(prior.dim(), 4);
        let offsets: Vec<usize> = prior.layout().map(|(o, _)| o).collect();
        assert_eq!(offsets, vec![0, 1, 3]);
        let mut rng = Rng::new(6);
        let th = prior.sample(&mut rng);
        let expect = 2f64.ln() + LogNormal::new(1.0, 3.0).unwrap().log_prob(th[3]);
        assert_relative_eq!(prior.log_prob(&th), expect, max_relative = 1e-12);
        let h = 0.0 - 2f64.ln() + LogNormal::new(1.0, 3.0).unwrap().entropy();
        assert_relative_eq!(prior.entropy(), h, max_relative = 1e-12);
    }
}
