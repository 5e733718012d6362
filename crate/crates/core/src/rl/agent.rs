use crate::env::{DesignSpace, Environment};
use crate::error::{Error, Result};
use crate::estimators::Policy;
use crate::grad::{Activation, Adam, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::history::History;
use crate::math::LN_2PI;
use crate::rl::config::TrainConfig;
use crate::rl::mdp::{observation, Embedder, PosteriorEmbedder};
use crate::rng::Rng;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;

/// The policy's view of the design space.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    /// Squashed actions in `[−1, 1]^dim`, rescaled affinely onto the box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Action index `i` means design `lo + i`.
    Discrete { lo: i64, n: usize },
}

impl ActionSpace {
    pub fn from_design(ds: &DesignSpace) -> Self {
        match ds {
            DesignSpace::Box { lo, hi } => ActionSpace::Box {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            DesignSpace::Discrete { lo, hi } => ActionSpace::Discrete {
                lo: *lo,
                n: (hi - lo + 1) as usize,
            },
        }
    }

    /// Width of a raw action vector.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Box { lo, .. } => lo.len(),
            ActionSpace::Discrete { .. } => 1,
        }
    }

    pub fn to_design(&self, a: &[f64]) -> Vec<f64> {
        match self {
            ActionSpace::Box { lo, hi } => a
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (l, h))| (l + 0.5 * (x + 1.0) * (h - l)).clamp(*l, *h))
                .collect(),
            ActionSpace::Discrete { lo, .. } => vec![(*lo + a[0] as i64) as f64],
        }
    }
}

#[derive(Clone, Debug)]
enum CriticNet {
    /// `Q(s, a)` from the concatenated pair.
    Box(Mlp),
    /// `Q(s, ·) = body(s) · E + b` with one learned column of `E` per action.
    Discrete { body: Mlp, embed: ParamId, bias: ParamId },
}

/// Stochastic policy, critic ensemble with target copies and the entropy
/// temperature.
#[derive(Debug)]
pub struct Agent {
    pub space: ActionSpace,
    pub obs_dim: usize,
    pub target_entropy: f64,
    actor: Mlp,
    log_alpha: ParamId,
    pub actor_store: ParamStore,
    critics: Vec<CriticNet>,
    pub critic_stores: Vec<ParamStore>,
    pub critic_targets: Vec<ParamStore>,
    actor_opt: Adam,
    alpha_opt: Adam,
    critic_opts: Vec<Adam>,
}

/// Per-update diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentLosses {
    pub critic: f64,
    pub policy: f64,
    pub alpha: f64,
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(out);
    s
}

impl Agent {
    pub fn new(space: ActionSpace, obs_dim: usize, cfg: &TrainConfig, rng: &mut Rng) -> Self {
        let mut actor_store = ParamStore::new();
        let out = match &space {
            ActionSpace::Box { lo, .. } => 2 * lo.len(),
            ActionSpace::Discrete { n, .. } => *n,
        };
        let actor = Mlp::new(
            &mut actor_store,
            "actor",
            &sizes(obs_dim, &cfg.policy_hidden, out),
            Activation::Relu,
            false,
            rng,
        );
        let log_alpha = actor_store.add("log_alpha", Tensor::scalar(cfg.init_alpha.ln()));
        let target_entropy = cfg.target_entropy.unwrap_or(match &space {
            ActionSpace::Box { lo, .. } => -(lo.len() as f64),
            ActionSpace::Discrete { n, .. } => 0.5 * (*n as f64).ln(),
        });
        let mut critics = Vec::new();
        let mut critic_stores = Vec::new();
        for _ in 0..cfg.ensemble {
            let mut store = ParamStore::new();
            let net = match &space {
                ActionSpace::Box { lo, .. } => CriticNet::Box(Mlp::new(
                    &mut store,
                    "q",
                    &sizes(obs_dim + lo.len(), &cfg.critic_hidden, 1),
                    Activation::Relu,
                    false,
                    rng,
                )),
                ActionSpace::Discrete { n, .. } => {
                    let e = cfg.action_embed_dim;
                    let body = Mlp::new(
                        &mut store,
                        "q",
                        &sizes(obs_dim, &cfg.critic_hidden, e),
                        Activation::Relu,
                        false,
                        rng,
                    );
                    let embed = store.add_glorot("action_embed", e, *n, rng);
                    let bias = store.add("action_bias", Tensor::zeros(1, *n));
                    CriticNet::Discrete { body, embed, bias }
                }
            };
            critics.push(net);
            critic_stores.push(store);
        }
        let critic_targets = critic_stores.clone();
        let clip = cfg.clip_norm();
        Self {
            space,
            obs_dim,
            target_entropy,
            actor,
            log_alpha,
            actor_store,
            critic_opts: (0..cfg.ensemble).map(|_| Adam::new(cfg.critic_lr).with_clip(clip)).collect(),
            critics,
            critic_stores,
            critic_targets,
            actor_opt: Adam::new(cfg.policy_lr).with_clip(clip),
            alpha_opt: Adam::new(cfg.alpha_lr),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.actor_store.get(self.log_alpha).item().exp()
    }

    fn actor_out(&self, g: &mut Graph, obs: Var, frozen: bool) -> Result<Var> {
        if frozen {
            self.actor.forward_frozen(g, &self.actor_store, obs)
        } else {
            self.actor.forward(g, &self.actor_store, obs)
        }
    }

    /// Reparameterised squashed-Gaussian draw: `(a, log π(a|s))`.
    fn box_sample(&self, g: &mut Graph, obs: Var, eps: &Tensor, frozen: bool) -> Result<(Var, Var)> {
        let dim = self.space.dim();
        let out = self.actor_out(g, obs, frozen)?;
        let mu = g.slice_cols(out, 0, dim)?;
        let raw = g.slice_cols(out, dim, 2 * dim)?;
        let t = g.tanh(raw)?;
        let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        let s = g.scale(t, half)?;
        let log_std = g.add_scalar(s, LOG_STD_MIN + half)?;
        let std = g.exp(log_std)?;
        let e = g.input(eps.clone());
        let noise = g.mul(std, e)?;
        let u = g.add(mu, noise)?;
        let a = g.tanh(u)?;
        let base = eps.map(|z| -0.5 * (z * z + LN_2PI));
        let base = g.input(base);
        let gauss = g.sub(base, log_std)?;
        let a2 = g.square(a)?;
        let na2 = g.neg(a2)?;
        let jac = g.add_scalar(na2, 1.0 + TANH_EPS)?;
        let ljac = g.log(jac)?;
        let per = g.sub(gauss, ljac)?;
        let logp = g.sum_axis(per, 1)?;
        Ok((a, logp))
    }

    /// Row-wise `log π(· | s)` over all discrete actions.
    fn discrete_logp(&self, g: &mut Graph, obs: Var, frozen: bool) -> Result<Var> {
        let logits = self.actor_out(g, obs, frozen)?;
        g.log_softmax(logits)
    }

    /// Box critics: `batch × 1`. Discrete critics ignore `action` and return
    /// `batch × n`.
    fn q(&self, g: &mut Graph, k: usize, store: &ParamStore, obs: Var, action: Option<Var>, frozen: bool) -> Result<Var> {
        let run = |g: &mut Graph, m: &Mlp, x: Var| {
            if frozen {
                m.forward_frozen(g, store, x)
            } else {
                m.forward(g, store, x)
            }
        };
        match &self.critics[k] {
            CriticNet::Box(m) => {
                let a = action.ok_or_else(|| Error::contract("box critic needs an action"))?;
                let x = g.concat(&[obs, a], 1)?;
                run(g, m, x)
            }
            CriticNet::Discrete { body, embed, bias } => {
                let h = run(g, body, obs)?;
                let (e, b) = if frozen {
                    (g.frozen(store, *embed), g.frozen(store, *bias))
                } else {
                    (g.param(store, *embed), g.param(store, *bias))
                };
                g.affine(h, e, b)
            }
        }
    }

    /// Raw actions for a batch of observations.
    pub fn act(&self, obs: &[Vec<f64>], rngs: &mut [Rng], deterministic: bool) -> Result<Vec<Vec<f64>>> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(obs)?);
        match &self.space {
            ActionSpace::Box { lo, .. } => {
                let dim = lo.len();
                if deterministic {
                    let out = self.actor_out(&mut g, x, true)?;
                    let mu = g.slice_cols(out, 0, dim)?;
                    let a = g.tanh(mu)?;
                    let v = g.value(a);
                    return Ok((0..v.rows()).map(|i| v.row_slice(i).to_vec()).collect());
                }
                let eps: Vec<f64> = rngs[..obs.len()]
                    .iter_mut()
                    .flat_map(|r| (0..dim).map(|_| r.standard_normal()).collect::<Vec<_>>())
                    .collect();
                let (a, _) = self.box_sample(&mut g, x, &Tensor::matrix(obs.len(), dim, eps)?, true)?;
                let v = g.value(a);
                Ok((0..v.rows()).map(|i| v.row_slice(i).to_vec()).collect())
            }
            ActionSpace::Discrete { .. } => {
                let lp = self.discrete_logp(&mut g, x, true)?;
                let v = g.value(lp);
                Ok((0..v.rows())
                    .zip(rngs.iter_mut())
                    .map(|(i, r)| {
                        let row = v.row_slice(i);
                        let idx = if deterministic {
                            row.iter()
                                .enumerate()
                                .fold((0, f64::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b })
                                .0
                        } else {
                            categorical(row, r)
                        };
                        vec![idx as f64]
                    })
                    .collect())
            }
        }
    }

    /// One critic, actor and temperature step followed by a Polyak update
    /// of the target critics.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
        rewards: &[f64],
        next_obs: &[Vec<f64>],
        done: &[bool],
        gamma: f64,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<AgentLosses> {
        let n = obs.len();
        if actions.len() != n || rewards.len() != n || next_obs.len() != n || done.len() != n || n == 0 {
            return Err(Error::contract("agent update: mismatched batch"));
        }
        let obs_t = Tensor::from_rows(obs)?;
        let next_t = Tensor::from_rows(next_obs)?;
        let alpha = self.alpha();
        let v_next = self.next_values(&next_t, alpha, rng)?;
        let y: Vec<f64> = (0..n)
            .map(|i| rewards[i] + if done[i] { 0.0 } else { gamma * v_next[i] })
            .collect();
        let y = Tensor::matrix(n, 1, y)?;

        let mut critic_loss = 0.0;
        let onehot = match &self.space {
            ActionSpace::Discrete { n: na, .. } => {
                let mut m = Tensor::zeros(n, *na);
                for (i, a) in actions.iter().enumerate() {
                    m.data_mut()[i * na + a[0] as usize] = 1.0;
                }
                Some(m)
            }
            ActionSpace::Box { .. } => None,
        };
        for k in 0..self.critics.len() {
            let mut g = Graph::new();
            let x = g.input(obs_t.clone());
            let q = match &onehot {
                None => {
                    let a = g.input(Tensor::from_rows(actions)?);
                    self.q(&mut g, k, &self.critic_stores[k], x, Some(a), false)?
                }
                Some(m) => {
                    let all = self.q(&mut g, k, &self.critic_stores[k], x, None, false)?;
                    let mask = g.input(m.clone());
                    let sel = g.mul(all, mask)?;
                    g.sum_axis(sel, 1)?
                }
            };
            let target = g.input(y.clone());
            let d = g.sub(q, target)?;
            let sq = g.square(d)?;
            let loss = g.mean(sq)?;
            critic_loss += g.scalar(loss) / self.critics.len() as f64;
            let grads = g.backward(loss)?.for_store(&self.critic_stores[k]);
            self.critic_opts[k].step(&mut self.critic_stores[k], &grads)?;
        }

        let (policy_loss, mean_logp) = self.actor_step(&obs_t, alpha, rng)?;
        // d/d(log α) of −log α · (E log π + H̄)
        let g_alpha = -(mean_logp + self.target_entropy);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.actor_store.len()];
        grads[self.log_alpha.index()] = Some(Tensor::scalar(g_alpha));
        self.alpha_opt.step(&mut self.actor_store, &grads)?;

        for (t, live) in self.critic_targets.iter_mut().zip(&self.critic_stores) {
            crate::flows::polyak_update(t, live, tau)?;
        }
        Ok(AgentLosses {
            critic: critic_loss,
            policy: policy_loss,
            alpha,
        })
    }

    /// Soft state values under the target critics.
    fn next_values(&self, next: &Tensor, alpha: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let n = next.rows();
        let mut g = Graph::new();
        let x = g.input(next.clone());
        match &self.space {
            ActionSpace::Box { lo, .. } => {
                let dim = lo.len();
                let eps = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.standard_normal()).collect())?;
                let (a, logp) = self.box_sample(&mut g, x, &eps, true)?;
                let mut qmin = vec![f64::INFINITY; n];
                for k in 0..self.critics.len() {
                    let q = self.q(&mut g, k, &self.critic_targets[k], x, Some(a), true)?;
                    for (m, v) in qmin.iter_mut().zip(g.value(q).data()) {
                        *m = m.min(*v);
                    }
                }
                let lp = g.value(logp).data();
                Ok((0..n).map(|i| qmin[i] - alpha * lp[i]).collect())
            }
            ActionSpace::Discrete { n: na, .. } => {
                let lp = self.discrete_logp(&mut g, x, true)?;
                let mut qmin = vec![f64::INFINITY; n * na];
                for k in 0..self.critics.len() {
                    let q = self.q(&mut g, k, &self.critic_targets[k], x, None, true)?;
                    for (m, v) in qmin.iter_mut().zip(g.value(q).data()) {
                        *m = m.min(*v);
                    }
                }
                let lp = g.value(lp).data();
                Ok((0..n)
                    .map(|i| {
                        (0..*na)
                            .map(|j| {
                                let l = lp[i * na + j];
                                l.exp() * (qmin[i * na + j] - alpha * l)
                            })
                            .sum()
                    })
                    .collect())
            }
        }
    }

    /// Returns the policy loss and the batch mean of `log π`.
    fn actor_step(&mut self, obs: &Tensor, alpha: f64, rng: &mut Rng) -> Result<(f64, f64)> {
        let n = obs.rows();
        let k_n = self.critics.len() as f64;
        let mut g = Graph::new();
        let x = g.input(obs.clone());
        let (loss, mean_logp) = match &self.space {
            ActionSpace::Box { lo, .. } => {
                let dim = lo.len();
                let eps = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.standard_normal()).collect())?;
                let (a, logp) = self.box_sample(&mut g, x, &eps, false)?;
                let mut qsum: Option<Var> = None;
                for k in 0..self.critics.len() {
                    let q = self.q(&mut g, k, &self.critic_stores[k], x, Some(a), true)?;
                    qsum = Some(match qsum {
                        None => q,
                        Some(s) => g.add(s, q)?,
                    });
                }
                let qmean = g.scale(qsum.expect("ensemble is non-empty"), 1.0 / k_n)?;
                let al = g.scale(logp, alpha)?;
                let obj = g.sub(al, qmean)?;
                let loss = g.mean(obj)?;
                let ml = g.value(logp).data().iter().sum::<f64>() / n as f64;
                (loss, ml)
            }
            ActionSpace::Discrete { n: na, .. } => {
                let mut qmean = Tensor::zeros(n, *na);
                for k in 0..self.critics.len() {
                    let q = self.q(&mut g, k, &self.critic_stores[k], x, None, true)?;
                    for (m, v) in qmean.data_mut().iter_mut().zip(g.value(q).data()) {
                        *m += v / k_n;
                    }
                }
                let logp = self.discrete_logp(&mut g, x, false)?;
                let p = g.exp(logp)?;
                let al = g.scale(logp, alpha)?;
                let qv = g.input(qmean);
                let inner = g.sub(al, qv)?;
                let w = g.mul(p, inner)?;
                let total = g.sum(w)?;
                let loss = g.scale(total, 1.0 / n as f64)?;
                let (pv, lv) = (g.value(p).data(), g.value(logp).data());
                let ml = pv.iter().zip(lv).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                (loss, ml)
            }
        };
        let value = g.scalar(loss);
        let grads = g.backward(loss)?.for_store(&self.actor_store);
        self.actor_opt.step(&mut self.actor_store, &grads)?;
        Ok((value, mean_logp))
    }

    /// Load every store saved by the trainer's checkpoint layout.
    pub(crate) fn load(&mut self, ckpt: &crate::grad::Checkpoint) -> Result<()> {
        ckpt.load_store("policy/", &mut self.actor_store)?;
        for (k, (s, t)) in self.critic_stores.iter_mut().zip(&mut self.critic_targets).enumerate() {
            ckpt.load_store(&format!("critic_{k}/"), s)?;
            ckpt.load_store(&format!("critic_{k}/target/"), t)?;
        }
        Ok(())
    }

    pub(crate) fn save(&self, ckpt: &mut crate::grad::Checkpoint) {
        ckpt.add_store("policy/", &self.actor_store);
        for (k, (s, t)) in self.critic_stores.iter().zip(&self.critic_targets).enumerate() {
            ckpt.add_store(&format!("critic_{k}/"), s);
            ckpt.add_store(&format!("critic_{k}/target/"), t);
        }
    }
}

fn categorical(logp: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return j;
        }
    }
    logp.len() - 1
}

/// A trained agent as a design policy. Histories are embedded with the
/// posterior encoder it was trained against.
#[derive(Clone, Copy, Debug)]
pub struct TrainedPolicy<'a> {
    pub agent: &'a Agent,
    pub embedder: PosteriorEmbedder<'a>,
    pub deterministic: bool,
}

impl Policy for TrainedPolicy<'_> {
    fn designs(&self, env: &Environment, histories: &[&History], rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        let emb = self.embedder.embed(histories)?;
        let obs: Vec<Vec<f64>> = histories.iter().zip(&emb).map(|(h, e)| observation(env, h, e)).collect();
        let raw = self.agent.act(&obs, rngs, self.deterministic)?;
        Ok(raw.iter().map(|a| self.agent.space.to_design(a)).collect())
    }
}
