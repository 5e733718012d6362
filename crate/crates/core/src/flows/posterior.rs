use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::flows::{CouplingFlow, HistoryEncoder, LatentMap};
use crate::grad::{Adam, Graph, ParamStore, Tensor, Var};
use crate::history::HistoryBatch;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub heads: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: vec![128, 128],
            embed_dim: 32,
            encoder_hidden: 64,
            heads: 8,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden.contains(&0) || self.embed_dim == 0 || self.encoder_hidden == 0 {
            return Err(Error::config("flow sizes must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("flow embed_dim must be a multiple of heads"));
        }
        Ok(())
    }
}

/// `q(θ | h)`: history encoder, coupling flow and constraint maps. The
/// parameters live in a separate [`ParamStore`] so a target copy can share
/// this architecture.
#[derive(Clone, Debug)]
pub struct PosteriorNet {
    pub encoder: HistoryEncoder,
    pub flow: CouplingFlow,
    pub map: LatentMap,
}

impl PosteriorNet {
    pub fn new(env: &Environment, cfg: &FlowConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = HistoryEncoder::new(
            store,
            "encoder/",
            env.feature_dim(),
            cfg.encoder_hidden,
            cfg.embed_dim,
            cfg.heads,
            rng,
        );
        let map = LatentMap::from_prior(env.prior());
        let flow = CouplingFlow::new(store, "flow/", map.dim(), encoder.out_dim(), cfg.layers, &cfg.hidden, rng);
        Ok(Self { encoder, flow, map })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    fn unconstrain(&self, thetas: &[&[f64]]) -> Result<(Tensor, Tensor)> {
        let d = self.map.dim();
        let mut xs = Vec::with_capacity(thetas.len() * d);
        let mut lds = Vec::with_capacity(thetas.len());
        for (i, th) in thetas.iter().enumerate() {
            let (x, ld) = self
                .map
                .inverse(th)
                .ok_or_else(|| Error::contract(format!("latent sample {i} lies outside the prior support")))?;
            xs.extend(x);
            lds.push(ld);
        }
        Ok((Tensor::matrix(thetas.len(), d, xs)?, Tensor::matrix(thetas.len(), 1, lds)?))
    }

    /// `log q(θ_i | h_i)` as a `batch × 1` graph node. Every `θ_i` must be in
    /// the support.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        thetas: &[&[f64]],
        batch: &HistoryBatch,
        frozen: bool,
    ) -> Result<Var> {
        if thetas.len() != batch.batch() {
            return Err(Error::contract("one latent per history required"));
        }
        let (x, ld) = self.unconstrain(thetas)?;
        let cond = self.encoder.forward(g, store, batch, frozen)?;
        let x = g.input(x);
        let lq = self.flow.log_prob(g, store, x, cond, frozen)?;
        let ld = g.input(ld);
        g.sub(lq, ld)
    }

    /// Inference-only log-density; `−∞` for latents outside the support.
    pub fn log_prob(&self, store: &ParamStore, thetas: &[&[f64]], batch: &HistoryBatch) -> Result<Vec<f64>> {
        let inside: Vec<usize> = (0..thetas.len()).filter(|&i| self.map.inverse(thetas[i]).is_some()).collect();
        let mut out = vec![f64::NEG_INFINITY; thetas.len()];
        if inside.is_empty() {
            return Ok(out);
        }
        let sub_thetas: Vec<&[f64]> = inside.iter().map(|&i| thetas[i]).collect();
        let sub_batch = if inside.len() == thetas.len() {
            batch.clone()
        } else {
            select_batch(batch, &inside)?
        };
        let mut g = Graph::new();
        let lq = self.log_prob_graph(&mut g, store, &sub_thetas, &sub_batch, true)?;
        for (j, &i) in inside.iter().enumerate() {
            out[i] = g.value(lq).data()[j];
        }
        Ok(out)
    }

    /// `n` draws from `q(· | h)` for a single-history batch.
    pub fn sample(&self, store: &ParamStore, batch: &HistoryBatch, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if batch.batch() != 1 {
            return Err(Error::contract("sample expects exactly one history"));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let b = self.encoder.embed(store, batch)?;
        let c = b.cols();
        let cond = Tensor::matrix(n, c, b.data().iter().copied().cycle().take(n * c).collect())?;
        let d = self.map.dim();
        let z = Tensor::matrix(n, d, (0..n * d).map(|_| rng.standard_normal()).collect())?;
        let x = self.flow.sample_from_base(store, z, &cond)?;
        Ok((0..n).map(|i| self.map.forward(x.row_slice(i)).0).collect())
    }

    /// One Adam step on `−mean log q(θ_i | h_i)` over encoder and flow.
    pub fn fit_step(&self, store: &mut ParamStore, opt: &mut Adam, thetas: &[&[f64]], batch: &HistoryBatch) -> Result<f64> {
        if thetas.is_empty() {
            return Err(Error::contract("posterior batch is empty"));
        }
        let mut g = Graph::new();
        let lq = match self.log_prob_graph(&mut g, store, thetas, batch, false) {
            Ok(v) => v,
            Err(e @ Error::Numerical { .. }) => {
                self.report_offender(store, thetas, batch);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mean = g.mean(lq)?;
        let loss = g.neg(mean)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?.for_store(store);
        opt.step(store, &grads)?;
        Ok(value)
    }

    fn report_offender(&self, store: &ParamStore, thetas: &[&[f64]], batch: &HistoryBatch) {
        for i in 0..thetas.len() {
            let Ok(one) = select_batch(batch, &[i]) else { continue };
            let mut g = Graph::new();
            if self.log_prob_graph(&mut g, store, &thetas[i..=i], &one, true).is_err() {
                log::error!("posterior loss non-finite at sample {i}: theta = {:?}", thetas[i]);
                return;
            }
        }
    }
}

/// Sub-batch of the given histories.
pub fn select_batch(batch: &HistoryBatch, idx: &[usize]) -> Result<HistoryBatch> {
    let f = batch.features.cols();
    let t = batch.layout.t_max;
    let items: Vec<&[f64]> = idx
        .iter()
        .map(|&i| &batch.features.data()[i * t * f..][..batch.layout.lengths[i] * f])
        .collect();
    HistoryBatch::new(f, &items)
}

/// Epoch-based maximum-likelihood fit of `q(θ | h)` to a fixed data set.
/// The last `holdout` fraction of the pairs is not trained on; the
/// parameters from the epoch with the lowest held-out loss are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub epochs: usize,
    pub batch: usize,
    /// Initial rate; it follows a cosine down to a tenth of this.
    pub lr: f64,
    pub holdout: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 256,
            lr: 1e-3,
            holdout: 0.1,
        }
    }
}

/// Per-epoch mean training loss and held-out loss (`NaN` without holdout).
#[derive(Clone, Debug, PartialEq)]
pub struct FitTrace {
    pub train: Vec<f64>,
    pub holdout: Vec<f64>,
    pub best_epoch: usize,
}

/// Fit a fresh posterior network on `(θ_i, h_i)` pairs.
pub fn fit_posterior(
    env: &Environment,
    cfg: &FlowConfig,
    thetas: &[Vec<f64>],
    histories: &[crate::History],
    settings: &FitSettings,
    rng: &mut Rng,
) -> Result<(PosteriorNet, ParamStore, FitTrace)> {
    if thetas.len() != histories.len() || thetas.is_empty() {
        return Err(Error::contract("fit_posterior needs one history per latent"));
    }
    if settings.batch == 0 || !(settings.lr > 0.0) || !(0.0..1.0).contains(&settings.holdout) {
        return Err(Error::config("fit batch and learning rate must be positive and holdout in [0, 1)"));
    }
    let mut store = ParamStore::new();
    let net = PosteriorNet::new(env, cfg, &mut store, rng)?;
    let mut opt = Adam::new(settings.lr).with_clip(Some(10.0));
    let feats: Vec<Vec<f64>> = histories.iter().map(|h| h.features(env)).collect();
    let n_hold = (thetas.len() as f64 * settings.holdout) as usize;
    let n_train = thetas.len() - n_hold;
    if n_train == 0 {
        return Err(Error::config("holdout leaves no training pairs"));
    }
    let held_loss = |store: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for start in (n_train..thetas.len()).step_by(4096) {
            let idx = start..(start + 4096).min(thetas.len());
            let ts: Vec<&[f64]> = idx.clone().map(|i| thetas[i].as_slice()).collect();
            let fs: Vec<&[f64]> = idx.map(|i| feats[i].as_slice()).collect();
            let batch = HistoryBatch::new(env.feature_dim(), &fs)?;
            total -= net.log_prob(store, &ts, &batch)?.iter().sum::<f64>();
        }
        Ok(total / n_hold as f64)
    };
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut trace = FitTrace {
        train: Vec::with_capacity(settings.epochs),
        holdout: Vec::with_capacity(settings.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..settings.epochs {
        let progress = epoch as f64 / settings.epochs.saturating_sub(1).max(1) as f64;
        opt.lr = settings.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(settings.batch) {
            let ts: Vec<&[f64]> = idx.iter().map(|&i| thetas[i].as_slice()).collect();
            let fs: Vec<&[f64]> = idx.iter().map(|&i| feats[i].as_slice()).collect();
            let batch = HistoryBatch::new(env.feature_dim(), &fs)?;
            total += net.fit_step(&mut store, &mut opt, &ts, &batch)?;
            batches += 1;
        }
        trace.train.push(total / batches as f64);
        if n_hold == 0 {
            trace.holdout.push(f64::NAN);
            trace.best_epoch = epoch;
            continue;
        }
        let h = held_loss(&store)?;
        trace.holdout.push(h);
        if best.as_ref().is_none_or(|(b, _)| h < *b) {
            best = Some((h, store.clone()));
            trace.best_epoch = epoch;
        }
    }
    if let Some((_, s)) = best {
        store = s;
    }
    Ok((net, store, trace))
}
