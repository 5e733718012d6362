use crate::dists::{conjugate_posterior, IsotropicGaussian, Prior, Sample};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::flows::PosteriorNet;
use crate::grad::ParamStore;
use crate::history::{History, HistoryBatch};
use crate::rng::Rng;

/// An evaluable, samplable approximate posterior `q(θ | h)`.
pub trait Proposal: Sync {
    fn log_q(&self, thetas: &[&[f64]], histories: &[&History]) -> Result<Vec<f64>>;
    fn sample(&self, history: &History, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>>;
}

/// History-blind proposal equal to the prior.
#[derive(Clone, Debug)]
pub struct PriorProposal(pub Prior);

impl Proposal for PriorProposal {
    fn log_q(&self, thetas: &[&[f64]], _histories: &[&History]) -> Result<Vec<f64>> {
        Ok(thetas.iter().map(|t| self.0.log_prob(t)).collect())
    }

    fn sample(&self, _history: &History, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.sample_n(rng, n))
    }
}

/// Exact conjugate posterior, optionally with its variance multiplied.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianPosterior {
    pub prior: IsotropicGaussian,
    pub sigma: f64,
    pub var_inflation: f64,
}

impl AnalyticGaussianPosterior {
    pub fn new(prior: IsotropicGaussian, sigma: f64) -> Self {
        Self {
            prior,
            sigma,
            var_inflation: 1.0,
        }
    }

    pub fn inflated(mut self, factor: f64) -> Self {
        self.var_inflation = factor;
        self
    }

    pub fn posterior(&self, h: &History) -> Result<IsotropicGaussian> {
        let post = conjugate_posterior(&self.prior, self.sigma, h.outcomes())?;
        if self.var_inflation == 1.0 {
            Ok(post)
        } else {
            IsotropicGaussian::new(post.mean().to_vec(), post.var() * self.var_inflation)
        }
    }
}

impl Proposal for AnalyticGaussianPosterior {
    fn log_q(&self, thetas: &[&[f64]], histories: &[&History]) -> Result<Vec<f64>> {
        thetas
            .iter()
            .zip(histories)
            .map(|(t, h)| Ok(self.posterior(h)?.log_prob(t)))
            .collect()
    }

    fn sample(&self, history: &History, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        Ok(self.posterior(history)?.sample_n(rng, n))
    }
}

/// A learned flow posterior with its parameters.
#[derive(Clone, Debug)]
pub struct FlowProposal<'a> {
    pub net: &'a PosteriorNet,
    pub store: &'a ParamStore,
    pub env: &'a Environment,
    /// Lower clamp on `log q`; `None` leaves support violations at `−∞`.
    pub floor: Option<f64>,
}

const BATCH: usize = 4096;

impl Proposal for FlowProposal<'_> {
    fn log_q(&self, thetas: &[&[f64]], histories: &[&History]) -> Result<Vec<f64>> {
        if thetas.len() != histories.len() {
            return Err(Error::contract("one history per latent required"));
        }
        let mut out = Vec::with_capacity(thetas.len());
        for (ts, hs) in thetas.chunks(BATCH).zip(histories.chunks(BATCH)) {
            let feats: Vec<Vec<f64>> = hs.iter().map(|h| h.features(self.env)).collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let batch = HistoryBatch::new(self.env.feature_dim(), &refs)?;
            out.extend(self.net.log_prob(self.store, ts, &batch)?);
        }
        if let Some(f) = self.floor {
            out.iter_mut().for_each(|v| *v = v.max(f));
        }
        Ok(out)
    }

    fn sample(&self, history: &History, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let f = history.features(self.env);
        let batch = HistoryBatch::new(self.env.feature_dim(), &[&f])?;
        self.net.sample(self.store, &batch, n, rng)
    }
}
