use crate::env::Environment;
use crate::error::{Error, Result};
use crate::estimators::Proposal;
use crate::flows::PosteriorNet;
use crate::grad::{logsumexp_slice, ParamStore};
use crate::history::{History, HistoryBatch};
use crate::rng::Rng;

/// Lowest `log q` a reward may see; support violations land here.
pub const LOG_Q_FLOOR: f64 = -1e3;

/// History embedding `B_t` for the policy and critics.
pub trait Embedder: Sync {
    fn embed_dim(&self) -> usize;
    fn embed(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>>;
}

/// All-zero embeddings of a fixed width.
#[derive(Clone, Copy, Debug)]
pub struct ZeroEmbedder(pub usize);

impl Embedder for ZeroEmbedder {
    fn embed_dim(&self) -> usize {
        self.0
    }

    fn embed(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; self.0]; histories.len()])
    }
}

/// The posterior network's history encoder.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorEmbedder<'a> {
    pub net: &'a PosteriorNet,
    pub store: &'a ParamStore,
    pub env: &'a Environment,
}

pub(crate) fn history_batch(env: &Environment, histories: &[&History]) -> Result<HistoryBatch> {
    let feats: Vec<Vec<f64>> = histories.iter().map(|h| h.features(env)).collect();
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    HistoryBatch::new(env.feature_dim(), &refs)
}

impl Embedder for PosteriorEmbedder<'_> {
    fn embed_dim(&self) -> usize {
        self.net.embed_dim()
    }

    fn embed(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>> {
        if histories.is_empty() {
            return Ok(Vec::new());
        }
        let b = self.net.encoder.embed(self.store, &history_batch(self.env, histories)?)?;
        Ok((0..b.rows()).map(|i| b.row_slice(i).to_vec()).collect())
    }
}

/// Log-space likelihood products `log C_t` over `θ_0..θ_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastState {
    /// `thetas[0]` is the latent that generates the outcomes.
    pub thetas: Vec<Vec<f64>>,
    pub log_c: Vec<f64>,
}

impl ContrastState {
    pub fn new(thetas: Vec<Vec<f64>>) -> Self {
        let log_c = vec![0.0; thetas.len()];
        Self { thetas, log_c }
    }

    /// `log(C_t · 1)`.
    pub fn log_total(&self) -> f64 {
        logsumexp_slice(&self.log_c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SedMdpState {
    pub t: usize,
    pub history: History,
    /// `B_t`; zero at `t = 0`.
    pub embedding: Vec<f64>,
    /// `y_t`; zero at `t = 0`.
    pub last_outcome: Vec<f64>,
    pub contrast: Option<ContrastState>,
}

impl SedMdpState {
    pub fn initial(env: &Environment, embed_dim: usize, contrast: Option<ContrastState>) -> Self {
        Self {
            t: 0,
            history: History::new(),
            embedding: vec![0.0; embed_dim],
            last_outcome: vec![0.0; env.outcome_dim()],
            contrast,
        }
    }

    /// What the policy and critics see: `B_t`, the features of the latest
    /// step (zeros at the start) and `t / T`.
    pub fn observation(&self, env: &Environment) -> Vec<f64> {
        observation(env, &self.history, &self.embedding)
    }
}

pub(crate) fn observation_dim(env: &Environment, embed_dim: usize) -> usize {
    embed_dim + env.feature_dim() + 1
}

pub(crate) fn observation(env: &Environment, h: &History, embedding: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(observation_dim(env, embedding.len()));
    out.extend_from_slice(embedding);
    match (h.designs().last(), h.outcomes().last()) {
        (Some(d), Some(y)) => env.features(d, y, &mut out),
        _ => out.resize(out.len() + env.feature_dim(), 0.0),
    }
    out.push(h.len() as f64 / env.horizon() as f64);
    out
}

/// Advance every state by one experiment. `actions` are designs.
pub fn step_batch(
    env: &Environment,
    states: &mut [SedMdpState],
    actions: &[Vec<f64>],
    thetas: &[&[f64]],
    rngs: &mut [Rng],
    embedder: &dyn Embedder,
) -> Result<()> {
    if actions.len() != states.len() || thetas.len() != states.len() || rngs.len() < states.len() {
        return Err(Error::contract("step_batch: one action, latent and stream per state"));
    }
    for ((s, d), (th, rng)) in states.iter_mut().zip(actions).zip(thetas.iter().zip(rngs.iter_mut())) {
        if s.t >= env.horizon() {
            return Err(Error::EpisodeComplete {
                t: s.t,
                horizon: env.horizon(),
            });
        }
        if !env.design_space().contains(d) {
            return Err(Error::contract(format!("design {d:?} lies outside the design space")));
        }
        let y = env.simulate(th, d, rng);
        if let Some(c) = &mut s.contrast {
            for (lc, t) in c.log_c.iter_mut().zip(&c.thetas) {
                *lc += env.log_lik(&y, t, d)?;
            }
        }
        s.history.push(d.clone(), y.clone());
        s.last_outcome = y;
        s.t += 1;
    }
    let hs: Vec<&History> = states.iter().map(|s| &s.history).collect();
    let emb = embedder.embed(&hs)?;
    for (s, e) in states.iter_mut().zip(emb) {
        s.embedding = e;
    }
    Ok(())
}

pub fn step_mdp(
    env: &Environment,
    state: &SedMdpState,
    action: &[f64],
    theta: &[f64],
    rng: &mut Rng,
    embedder: &dyn Embedder,
) -> Result<SedMdpState> {
    let mut next = [state.clone()];
    step_batch(env, &mut next, &[action.to_vec()], &[theta], std::slice::from_mut(rng), embedder)?;
    let [next] = next;
    Ok(next)
}

/// `log p(y_t | θ_0, d_t) − log(C_t · 1) + log(C_{t−1} · 1)`.
pub fn spce_reward(
    env: &Environment,
    prev: &SedMdpState,
    next: &SedMdpState,
    theta0: &[f64],
    d: &[f64],
    y: &[f64],
) -> Result<f64> {
    let ll = env.log_lik(y, theta0, d)?;
    match (&prev.contrast, &next.contrast) {
        (Some(p), Some(n)) => Ok(ll - n.log_total() + p.log_total()),
        _ => Err(Error::contract("spce_reward needs contrastive state")),
    }
}

/// The posterior that scores rewards.
#[derive(Clone, Copy)]
pub struct RewardPosterior<'a> {
    pub q: &'a dyn Proposal,
    /// Pin `log q(θ | B_0)` to zero instead of evaluating `q`.
    pub fixed_initial: bool,
}

impl RewardPosterior<'_> {
    /// Clamped `log q(θ_i | h_i)`.
    pub fn log_q(&self, thetas: &[&[f64]], histories: &[&History]) -> Result<Vec<f64>> {
        if thetas.len() != histories.len() {
            return Err(Error::contract("one history per latent required"));
        }
        let mut out = vec![0.0; thetas.len()];
        let idx: Vec<usize> = (0..thetas.len())
            .filter(|&i| !(self.fixed_initial && histories[i].is_empty()))
            .collect();
        let ts: Vec<&[f64]> = idx.iter().map(|&i| thetas[i]).collect();
        let hs: Vec<&History> = idx.iter().map(|&i| histories[i]).collect();
        for (&i, v) in idx.iter().zip(self.q.log_q(&ts, &hs)?) {
            out[i] = if v.is_nan() { LOG_Q_FLOOR } else { v.max(LOG_Q_FLOOR) };
        }
        Ok(out)
    }

    /// `log q(θ | h_{t}) − log q(θ | h_{t−1})` per item.
    pub fn rewards(&self, thetas: &[&[f64]], prev: &[&History], next: &[&History]) -> Result<Vec<f64>> {
        let n = thetas.len();
        if prev.len() != n || next.len() != n {
            return Err(Error::contract("rewards: mismatched batch"));
        }
        let ts: Vec<&[f64]> = thetas.iter().chain(thetas).copied().collect();
        let hs: Vec<&History> = next.iter().chain(prev).copied().collect();
        let lq = self.log_q(&ts, &hs)?;
        Ok((0..n).map(|i| lq[i] - lq[n + i]).collect())
    }
}

/// `log q′(θ | B_t) − log q′(θ | B_{t−1})`.
pub fn scee_reward(q: &RewardPosterior, theta: &[f64], h_t: &History, h_prev: &History) -> Result<f64> {
    Ok(q.rewards(&[theta], &[h_prev], &[h_t])?[0])
}
