use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::FlowConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Cross-entropy rewards through the target posterior.
    Scee,
    /// Contrastive rewards from explicit likelihoods.
    Spce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalEstimator {
    /// sPCE when the likelihood is explicit, sCEE otherwise.
    Auto,
    Spce,
    Scee,
}

/// Every trainer knob. Defaults are the source-location settings; see
/// [`TrainConfig::for_env`] for the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub posterior_lr: f64,
    pub alpha_lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub rollouts_per_iter: usize,
    /// Gradient steps per iteration; unset means one per environment step.
    pub updates_per_iter: Option<usize>,
    pub ensemble: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Width of the per-action critic embedding for discrete designs.
    pub action_embed_dim: usize,
    pub init_alpha: f64,
    /// Entropy target; unset picks `−dim` (continuous) or `½·ln n` (discrete).
    pub target_entropy: Option<f64>,
    pub reward: RewardMode,
    /// Contrastive samples per rollout in sPCE reward mode.
    pub contrastive_l: usize,
    pub use_target_posterior: bool,
    pub fixed_initial_posterior: bool,
    /// Evaluation cadence as a fraction of the iteration budget.
    pub eval_every: f64,
    pub eval_rollouts: usize,
    pub eval_l: usize,
    pub eval_estimator: EvalEstimator,
    /// Evaluate the sampling policy rather than its mode.
    pub eval_stochastic: bool,
    pub divergence_threshold: f64,
    /// Iterations in the moving-average return watched for divergence.
    pub divergence_window: usize,
    /// Clip gradients by global norm; off by default.
    pub grad_clip: bool,
    pub grad_clip_norm: f64,
    /// Fill the `wall_ms` log column (makes logs run-dependent).
    pub record_wall_time: bool,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            horizon: 30,
            gamma: 0.9,
            tau: 1e-3,
            policy_lr: 1e-4,
            critic_lr: 3e-4,
            posterior_lr: 3e-4,
            alpha_lr: 3e-4,
            buffer_size: 10_000_000,
            batch_size: 256,
            rollouts_per_iter: 1,
            updates_per_iter: None,
            ensemble: 2,
            policy_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            action_embed_dim: 16,
            init_alpha: 0.1,
            target_entropy: None,
            reward: RewardMode::Scee,
            contrastive_l: 255,
            use_target_posterior: true,
            fixed_initial_posterior: true,
            eval_every: 0.05,
            eval_rollouts: 100,
            eval_l: 10_000,
            eval_estimator: EvalEstimator::Auto,
            eval_stochastic: false,
            divergence_threshold: 1e5,
            divergence_window: 20,
            grad_clip: false,
            grad_clip_norm: 10.0,
            record_wall_time: false,
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Per-environment defaults for `source_location`, `ces` and
    /// `prey_population`; anything else gets the plain default.
    pub fn for_env(name: &str) -> Self {
        let base = Self::default();
        match name {
            "ces" => Self {
                iterations: 100_000,
                horizon: 10,
                gamma: 0.9,
                tau: 5e-3,
                policy_lr: 3e-4,
                critic_lr: 3e-4,
                buffer_size: 10_000_000,
                ..base
            },
            "prey_population" => Self {
                iterations: 20_000,
                horizon: 10,
                gamma: 0.95,
                tau: 1e-2,
                policy_lr: 1e-4,
                critic_lr: 1e-3,
                buffer_size: 1_000_000,
                eval_stochastic: true,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if self.iterations == 0 || self.horizon == 0 {
            return Err(Error::config("iterations and horizon must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        for (name, lr) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("posterior_lr", self.posterior_lr),
            ("alpha_lr", self.alpha_lr),
            ("init_alpha", self.init_alpha),
        ] {
            if !pos(lr) {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.rollouts_per_iter == 0 || self.ensemble == 0 {
            return Err(Error::config("batch_size, rollouts_per_iter and ensemble must be positive"));
        }
        if self.buffer_size < self.batch_size {
            return Err(Error::config("buffer_size is smaller than batch_size"));
        }
        if self.policy_hidden.contains(&0) || self.critic_hidden.contains(&0) || self.action_embed_dim == 0 {
            return Err(Error::config("network sizes must be positive"));
        }
        if !(self.eval_every > 0.0 && self.eval_every <= 1.0) {
            return Err(Error::config("eval_every must lie in (0, 1]"));
        }
        if self.grad_clip && !pos(self.grad_clip_norm) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        if !pos(self.divergence_threshold) || self.divergence_window == 0 {
            return Err(Error::config("divergence settings must be positive"));
        }
        if self.reward == RewardMode::Spce && !self.fixed_initial_posterior {
            log::warn!("fixed_initial_posterior has no effect with spce rewards");
        }
        Ok(())
    }

    /// Validated copy with ablation flags applied; warns about settings the
    /// flags make irrelevant.
    pub fn with_ablation(mut self, use_target_posterior: bool, fixed_initial_posterior: bool) -> Self {
        self.use_target_posterior = use_target_posterior;
        self.fixed_initial_posterior = fixed_initial_posterior;
        self.warn_ignored();
        self
    }

    /// Returns the warnings emitted.
    pub fn warn_ignored(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.use_target_posterior {
            out.push(format!(
                "use_target_posterior is off: tau = {} is ignored for the posterior and only drives the target critics",
                self.tau
            ));
        }
        for w in &out {
            log::warn!("{w}");
        }
        out
    }

    /// Norm passed to the optimisers, `None` when clipping is off.
    pub fn clip_norm(&self) -> Option<f64> {
        self.grad_clip.then_some(self.grad_clip_norm)
    }

    pub fn updates(&self) -> usize {
        self.updates_per_iter.unwrap_or(self.horizon * self.rollouts_per_iter)
    }

    pub fn eval_interval(&self) -> usize {
        ((self.iterations as f64 * self.eval_every).round() as usize).max(1)
    }
}
