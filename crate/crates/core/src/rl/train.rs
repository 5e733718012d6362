use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::dists::Sample;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::estimators::{rollout_policy, scee, spce, EstimateReport, FlowProposal};
use crate::flows::{polyak_update, PosteriorNet};
use crate::grad::{Adam, Checkpoint, ParamStore};
use crate::history::History;
use crate::math::mean_stderr;
use crate::rl::agent::{ActionSpace, Agent, TrainedPolicy};
use crate::rl::buffer::{ReplayBuffer, ReplayEntry};
use crate::rl::config::{EvalEstimator, RewardMode, TrainConfig};
use crate::rl::mdp::{
    history_batch, observation, observation_dim, step_batch, ContrastState, PosteriorEmbedder, RewardPosterior,
    SedMdpState, LOG_Q_FLOOR,
};
use crate::rng::Rng;

/// One training-log row; empty cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub return_mean: f64,
    pub return_stderr: f64,
    #[serde(rename = "L_q")]
    pub l_q: Option<f64>,
    pub policy_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub eval_eig: Option<f64>,
    pub eval_stderr: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub l_q: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
}

/// Live and target posteriors, the agent, the replay buffer and the
/// random streams of one training run.
#[derive(Debug)]
pub struct Trainer {
    pub env: Environment,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub posterior: PosteriorNet,
    pub kappa: ParamStore,
    pub kappa_target: ParamStore,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    post_opt: Adam,
    rng: Rng,
    pub iter: usize,
    recent_returns: VecDeque<f64>,
    last_stats: Option<UpdateStats>,
}

impl Trainer {
    pub fn new(env: &Environment, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cfg.warn_ignored();
        if cfg.reward == RewardMode::Spce {
            env.require_explicit()?;
        }
        let env = env.clone().with_horizon(cfg.horizon);
        let rng = Rng::new(seed);
        let mut init = rng.split_named("init");
        let mut kappa = ParamStore::new();
        let posterior = PosteriorNet::new(&env, &cfg.flow, &mut kappa, &mut init)?;
        let kappa_target = kappa.clone();
        let agent = Agent::new(
            ActionSpace::from_design(env.design_space()),
            observation_dim(&env, posterior.embed_dim()),
            &cfg,
            &mut init,
        );
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_size, cfg.horizon)?,
            post_opt: Adam::new(cfg.posterior_lr).with_clip(cfg.clip_norm()),
            env,
            seed,
            posterior,
            kappa,
            kappa_target,
            agent,
            rng,
            iter: 0,
            recent_returns: VecDeque::new(),
            last_stats: None,
            cfg,
        })
    }

    pub fn embedder(&self) -> PosteriorEmbedder<'_> {
        PosteriorEmbedder {
            net: &self.posterior,
            store: &self.kappa,
            env: &self.env,
        }
    }

    /// The flow that scores rewards: the target copy unless that ablation is
    /// switched off.
    pub fn reward_flow(&self) -> FlowProposal<'_> {
        FlowProposal {
            net: &self.posterior,
            store: if self.cfg.use_target_posterior {
                &self.kappa_target
            } else {
                &self.kappa
            },
            env: &self.env,
            floor: Some(LOG_Q_FLOOR),
        }
    }

    pub fn reward_posterior<'a>(&self, q: &'a FlowProposal<'a>) -> RewardPosterior<'a> {
        RewardPosterior {
            q,
            fixed_initial: self.cfg.fixed_initial_posterior,
        }
    }

    pub fn policy(&self, deterministic: bool) -> TrainedPolicy<'_> {
        TrainedPolicy {
            agent: &self.agent,
            embedder: self.embedder(),
            deterministic,
        }
    }

    /// Run `rollouts_per_iter` episodes with the stochastic policy, store
    /// them and return their undiscounted returns.
    pub fn collect(&mut self) -> Result<Vec<f64>> {
        let n = self.cfg.rollouts_per_iter;
        let t_max = self.cfg.horizon;
        let base = self.rng.split_named("collect").split(self.iter as u64);
        let mut rngs: Vec<Rng> = (0..n).map(|i| base.split(i as u64)).collect();
        let thetas: Vec<Vec<f64>> = rngs.iter_mut().map(|r| self.env.prior().sample(r)).collect();
        let spce_mode = self.cfg.reward == RewardMode::Spce;
        let embed_dim = self.posterior.embed_dim();
        let mut states: Vec<SedMdpState> = thetas
            .iter()
            .zip(rngs.iter_mut())
            .map(|(th, r)| {
                let contrast = spce_mode.then(|| {
                    let mut all = vec![th.clone()];
                    all.extend(self.env.prior().sample_n(r, self.cfg.contrastive_l));
                    ContrastState::new(all)
                });
                SedMdpState::initial(&self.env, embed_dim, contrast)
            })
            .collect();
        let mut actions: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t_max); n];
        let mut rewards: Vec<Vec<f64>> = vec![Vec::with_capacity(t_max); n];
        let theta_refs: Vec<&[f64]> = thetas.iter().map(Vec::as_slice).collect();
        for _ in 0..t_max {
            let obs: Vec<Vec<f64>> = states.iter().map(|s| s.observation(&self.env)).collect();
            let raw = self.agent.act(&obs, &mut rngs, false)?;
            let designs: Vec<Vec<f64>> = raw.iter().map(|a| self.agent.space.to_design(a)).collect();
            let before: Vec<Option<(f64, f64)>> = states
                .iter()
                .map(|s| s.contrast.as_ref().map(|c| (c.log_c[0], c.log_total())))
                .collect();
            step_batch(&self.env, &mut states, &designs, &theta_refs, &mut rngs, &self.embedder())?;
            for i in 0..n {
                if let (Some((l0, tot)), Some(c)) = (before[i], &states[i].contrast) {
                    rewards[i].push(c.log_c[0] - l0 - c.log_total() + tot);
                }
                actions[i].push(raw[i].clone());
            }
        }
        let returns = if spce_mode {
            rewards.iter().map(|r| r.iter().sum()).collect()
        } else {
            let empty = History::new();
            let finals: Vec<&History> = states.iter().map(|s| &s.history).collect();
            let q = self.reward_flow();
            let r = self.reward_posterior(&q).rewards(&theta_refs, &vec![&empty; n], &finals)?;
            r
        };
        for ((s, th), (a, r)) in states.into_iter().zip(thetas).zip(actions.into_iter().zip(rewards)) {
            self.buffer.push(ReplayEntry {
                theta: th,
                history: s.history,
                actions: a,
                fixed_rewards: spce_mode.then_some(r),
            })?;
        }
        Ok(returns)
    }

    /// One gradient step for the posterior, critics and policy on a fresh
    /// mini-batch, followed by the Polyak updates.
    pub fn update(&mut self, rng: &mut Rng) -> Result<UpdateStats> {
        let batch = self.buffer.sample(self.cfg.batch_size, rng);
        if batch.is_empty() {
            return Err(Error::contract("update called on an empty replay buffer"));
        }
        let t_max = self.cfg.horizon;
        let mut thetas = Vec::with_capacity(batch.len());
        let mut prev = Vec::with_capacity(batch.len());
        let mut next = Vec::with_capacity(batch.len());
        let mut actions = Vec::with_capacity(batch.len());
        let mut done = Vec::with_capacity(batch.len());
        for tr in &batch {
            let e = self.buffer.entry(tr.entry);
            thetas.push(e.theta.clone());
            prev.push(e.history.truncated(tr.t));
            next.push(e.history.truncated(tr.t + 1));
            actions.push(e.actions[tr.t].clone());
            done.push(tr.t + 1 == t_max);
        }
        let theta_refs: Vec<&[f64]> = thetas.iter().map(Vec::as_slice).collect();
        let prev_refs: Vec<&History> = prev.iter().collect();
        let next_refs: Vec<&History> = next.iter().collect();

        let l_q = self.posterior.fit_step(
            &mut self.kappa,
            &mut self.post_opt,
            &theta_refs,
            &history_batch(&self.env, &next_refs)?,
        )?;

        let rewards = match self.cfg.reward {
            RewardMode::Spce => batch
                .iter()
                .map(|tr| {
                    let e = self.buffer.entry(tr.entry);
                    e.fixed_rewards.as_ref().map(|r| r[tr.t])
                })
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::contract("spce replay entry without rewards"))?,
            RewardMode::Scee => {
                let q = self.reward_flow();
                self.reward_posterior(&q).rewards(&theta_refs, &prev_refs, &next_refs)?
            }
        };

        let both: Vec<&History> = prev_refs.iter().chain(&next_refs).copied().collect();
        let emb = crate::rl::mdp::Embedder::embed(&self.embedder(), &both)?;
        let n = batch.len();
        let obs: Vec<Vec<f64>> = (0..n).map(|i| observation(&self.env, &prev[i], &emb[i])).collect();
        let next_obs: Vec<Vec<f64>> = (0..n).map(|i| observation(&self.env, &next[i], &emb[n + i])).collect();

        let losses = self
            .agent
            .update(&obs, &actions, &rewards, &next_obs, &done, self.cfg.gamma, self.cfg.tau, rng)?;
        if self.cfg.use_target_posterior {
            polyak_update(&mut self.kappa_target, &self.kappa, self.cfg.tau)?;
        }
        let stats = UpdateStats {
            l_q,
            policy_loss: losses.policy,
            critic_loss: losses.critic,
            alpha: losses.alpha,
        };
        self.last_stats = Some(stats);
        Ok(stats)
    }

    /// Score the deterministic policy: sPCE where the likelihood is
    /// explicit (unless configured otherwise), sCEE with the live posterior
    /// otherwise.
    pub fn evaluate(&self, rng: &Rng) -> Result<EstimateReport> {
        let policy = self.policy(!self.cfg.eval_stochastic);
        let ro = rollout_policy(&self.env, &policy, &rng.split(0), self.cfg.eval_rollouts)?;
        let use_spce = match self.cfg.eval_estimator {
            EvalEstimator::Auto => self.env.is_explicit(),
            EvalEstimator::Spce => true,
            EvalEstimator::Scee => false,
        };
        if use_spce {
            spce(&ro, &self.env, self.cfg.eval_l, &rng.split(1))
        } else {
            let q = FlowProposal {
                net: &self.posterior,
                store: &self.kappa,
                env: &self.env,
                floor: None,
            };
            scee(&ro, &q, self.env.prior().entropy(), &self.env, rng.key())
        }
    }

    fn diverged(&self, why: &str) -> Error {
        let window: Vec<String> = self.recent_returns.iter().map(|r| format!("{r:.4e}")).collect();
        Error::Diverged {
            iter: self.iter,
            diagnostic: format!(
                "{why}; recent returns [{}]; last update {:?}; buffer {} episodes",
                window.join(", "),
                self.last_stats,
                self.buffer.len()
            ),
        }
    }

    /// One training iteration: collect, update, maybe evaluate.
    pub fn step(&mut self) -> Result<LogRow> {
        let start = Instant::now();
        let returns = self.collect().map_err(|e| self.numerical(e))?;
        let (ret_mean, ret_se) = mean_stderr(&returns);
        self.recent_returns.push_back(ret_mean);
        while self.recent_returns.len() > self.cfg.divergence_window {
            self.recent_returns.pop_front();
        }
        let ma = self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64;
        if !ma.is_finite() || ma.abs() > self.cfg.divergence_threshold {
            return Err(self.diverged(&format!("moving-average return {ma}")));
        }

        let mut row = LogRow {
            iter: self.iter,
            return_mean: ret_mean,
            return_stderr: ret_se,
            l_q: None,
            policy_loss: None,
            critic_loss: None,
            eval_eig: None,
            eval_stderr: None,
            wall_ms: None,
        };
        if self.buffer.transitions() >= self.cfg.batch_size {
            let mut urng = self.rng.split_named("update").split(self.iter as u64);
            let k = self.cfg.updates();
            let mut acc = UpdateStats::default();
            for _ in 0..k {
                let s = self.update(&mut urng).map_err(|e| self.numerical(e))?;
                acc.l_q += s.l_q / k as f64;
                acc.policy_loss += s.policy_loss / k as f64;
                acc.critic_loss += s.critic_loss / k as f64;
            }
            if k > 0 {
                row.l_q = Some(acc.l_q);
                row.policy_loss = Some(acc.policy_loss);
                row.critic_loss = Some(acc.critic_loss);
            }
        }
        self.iter += 1;
        if self.iter.is_multiple_of(self.cfg.eval_interval()) || self.iter == self.cfg.iterations {
            // common random numbers across snapshots
            let rep = self.evaluate(&self.rng.split_named("eval"))?;
            log::info!(
                "iter {}: eval {} = {:.4} ± {:.4}",
                self.iter,
                rep.estimator,
                rep.value,
                rep.stderr
            );
            row.eval_eig = Some(rep.value);
            row.eval_stderr = Some(rep.stderr);
        }
        if self.cfg.record_wall_time {
            row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(row)
    }

    fn numerical(&self, e: Error) -> Error {
        match e {
            Error::Numerical { node, op } => self.diverged(&format!("non-finite value at node {node} ({op})")),
            other => other,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.seed);
        ck.set_meta("env", self.env.name());
        ck.set_meta("iter", self.iter.to_string());
        ck.set_meta("config", toml::to_string(&self.cfg).map_err(|e| Error::Toml(e.to_string()))?);
        self.agent.save(&mut ck);
        ck.add_store("", &self.kappa);
        ck.add_store("flow_target/", &self.kappa_target);
        Ok(ck)
    }

    /// Rebuild a trainer from [`Trainer::checkpoint`] output. The replay
    /// buffer starts empty.
    pub fn from_checkpoint(env: &Environment, ck: &Checkpoint) -> Result<Self> {
        match ck.meta("env") {
            Some(name) if name == env.name() => {}
            other => {
                return Err(Error::config(format!(
                    "checkpoint was trained on {:?}, not '{}'",
                    other,
                    env.name()
                )))
            }
        }
        let text = ck
            .meta("config")
            .ok_or_else(|| Error::Checkpoint("missing config echo".into()))?;
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let mut t = Trainer::new(env, cfg, ck.seed)?;
        t.agent.load(ck)?;
        ck.load_store("", &mut t.kappa)?;
        ck.load_store("flow_target/", &mut t.kappa_target)?;
        t.iter = ck.meta("iter").and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok(t)
    }
}

pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub trainer: Trainer,
}

/// Full training run. With `out_dir`, writes `train_log.csv`,
/// `checkpoint.bin` and, on divergence, `diagnostic.txt`.
pub fn train(env: &Environment, cfg: &TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainReport> {
    let mut trainer = Trainer::new(env, cfg.clone(), seed)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    while trainer.iter < cfg.iterations {
        match trainer.step() {
            Ok(row) => log.push(row),
            Err(e) => {
                if let (Some(dir), Error::Diverged { .. }) = (out_dir, &e) {
                    std::fs::write(dir.join("diagnostic.txt"), e.to_string())?;
                    write_log(&dir.join("train_log.csv"), &log)?;
                }
                return Err(e);
            }
        }
    }
    if let Some(dir) = out_dir {
        write_log(&dir.join("train_log.csv"), &log)?;
        trainer.checkpoint()?.save(&dir.join("checkpoint.bin"))?;
    }
    Ok(TrainReport { log, trainer })
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
