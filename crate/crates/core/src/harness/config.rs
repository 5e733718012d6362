use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dists::IsotropicGaussian;
use crate::env::{CesTask, ConjugateGaussianTask, Environment, PreyPopulationTask, SourceLocationTask};
use crate::error::{Error, Result};
use crate::estimators::AnalyticGaussianPosterior;
use crate::flows::{FitSettings, FlowConfig};
use crate::rl::TrainConfig;

/// Prefix of environment-variable overrides, e.g.
/// `SEDKIT_ESTIMATOR__L=100` sets `estimator.l`.
pub const ENV_PREFIX: &str = "SEDKIT_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugateParams {
    pub k: usize,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub sigma: f64,
}

impl Default for ConjugateParams {
    fn default() -> Self {
        Self {
            k: 10,
            prior_mean: 0.0,
            prior_var: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceParams {
    pub n_sources: usize,
    pub k: usize,
    pub b: f64,
    pub m: f64,
    pub sigma: f64,
    pub bound: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            n_sources: 2,
            k: 2,
            b: 1e-1,
            m: 1e-4,
            sigma: 0.5,
            bound: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CesParams {
    pub k: usize,
    pub tau: f64,
    /// Rating clip; the default is `2^-22`.
    pub eps: f64,
    pub max_amount: f64,
    pub rho_beta: [f64; 2],
    pub alpha_concentration: f64,
    pub log_u_mean: f64,
    pub log_u_sd: f64,
}

impl Default for CesParams {
    fn default() -> Self {
        Self {
            k: 3,
            tau: 0.005,
            eps: 2f64.powi(-22),
            max_amount: 100.0,
            rho_beta: [1.0, 1.0],
            alpha_concentration: 1.0,
            log_u_mean: 1.0,
            log_u_sd: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreyParams {
    /// Simulated hours.
    pub duration: f64,
    pub ode_steps: usize,
    pub max_population: i64,
    pub log_mean: f64,
    pub log_sd: f64,
}

impl Default for PreyParams {
    fn default() -> Self {
        Self {
            duration: 24.0,
            ode_steps: 200,
            max_population: 300,
            log_mean: -1.4,
            log_sd: 1.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// `conjugate_gaussian`, `source_location`, `ces` or `prey_population`.
    pub name: String,
    /// Withhold the explicit likelihood.
    pub implicit: bool,
    /// Experiments per episode; when set it also replaces the trainer's
    /// horizon.
    pub horizon: Option<usize>,
    pub conjugate: ConjugateParams,
    pub source: SourceParams,
    pub ces: CesParams,
    pub prey: PreyParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: "source_location".into(),
            implicit: false,
            horizon: None,
            conjugate: ConjugateParams::default(),
            source: SourceParams::default(),
            ces: CesParams::default(),
            prey: PreyParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn build(&self, horizon: usize) -> Result<Environment> {
        let h = self.horizon.unwrap_or(horizon);
        let env = match self.name.as_str() {
            "conjugate_gaussian" => {
                let c = &self.conjugate;
                Environment::new(ConjugateGaussianTask::new(c.k, c.prior_mean, c.prior_var, c.sigma)?, h)?
            }
            "source_location" => {
                let s = &self.source;
                Environment::new(SourceLocationTask::new(s.n_sources, s.k, s.b, s.m, s.sigma, s.bound)?, h)?
            }
            "ces" => {
                let c = &self.ces;
                let task = CesTask::new(c.k, c.tau, c.eps, c.max_amount)?.with_prior(
                    (c.rho_beta[0], c.rho_beta[1]),
                    c.alpha_concentration,
                    (c.log_u_mean, c.log_u_sd),
                )?;
                Environment::new(task, h)?
            }
            "prey_population" => {
                let p = &self.prey;
                let task = PreyPopulationTask::new(p.duration, p.ode_steps, p.max_population)?
                    .with_prior(p.log_mean, p.log_sd)?;
                Environment::new(task, h)?
            }
            other => return Err(Error::config(format!("unknown environment '{other}'"))),
        };
        Ok(if self.implicit { env.implicit() } else { env })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// `spce`, `snmc`, `scee` or `sace`.
    pub name: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            name: "spce".into(),
            l: 10_000,
            n: 1_000,
        }
    }
}

/// One conjugate task `(k, σ0, σ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateTask {
    pub k: usize,
    pub prior_var: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Config {
    pub tasks: Vec<ConjugateTask>,
    /// Observations per rollout.
    pub observations: usize,
    pub estimators: Vec<String>,
    #[serde(rename = "L")]
    pub l: Vec<usize>,
    pub n: usize,
    /// Contrastive samples per pass; bounds memory for large `L`.
    pub chunk: usize,
    /// Also fit a flow posterior per task and report its sCEE.
    pub learned_scee: bool,
    /// Simulated `(θ, y)` pairs the learned posterior is trained on.
    pub flow_samples: usize,
    pub flow_fit: FitSettings,
    pub flow: FlowConfig,
}

impl Default for Table1Config {
    fn default() -> Self {
        let t = |k, prior_var, sigma| ConjugateTask { k, prior_var, sigma };
        Self {
            tasks: vec![
                t(10, 0.5, 5.0),
                t(10, 0.5, 1.0),
                t(10, 1.0, 1.0),
                t(10, 2.0, 1.0),
                t(10, 2.0, 0.5),
                t(10, 4.0, 0.5),
                t(20, 4.0, 0.5),
            ],
            observations: 10,
            estimators: vec!["spce".into(), "snmc".into(), "scee".into()],
            l: vec![10_000],
            n: 1_000,
            chunk: 10_000,
            learned_scee: false,
            flow_samples: 20_000,
            flow_fit: FitSettings::default(),
            flow: FlowConfig {
                layers: 4,
                hidden: vec![32, 32],
                ..FlowConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Checkpoint to score; unset evaluates a uniform-random policy.
    pub checkpoint: Option<PathBuf>,
    /// Use the stochastic policy instead of its mean action.
    pub stochastic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorConfig {
    pub checkpoint: Option<PathBuf>,
    pub history_file: Option<PathBuf>,
    pub n: usize,
    /// Sample the exact conjugate posterior instead of a trained flow.
    pub analytic: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            history_file: None,
            n: 1_000,
            analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub label: String,
    pub use_target_posterior: bool,
    pub fixed_initial_posterior: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let v = |label: &str, t, f| AblationVariant {
            label: label.into(),
            use_target_posterior: t,
            fixed_initial_posterior: f,
        };
        Self {
            variants: vec![
                v("full", true, true),
                v("no_target", false, true),
                v("no_fixed_initial", true, false),
                v("neither", false, false),
            ],
        }
    }
}

/// The whole experiment tree. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Fill `wall_ms` columns. Off keeps reruns byte-identical.
    pub record_wall_time: bool,
    pub env: EnvConfig,
    pub estimator: EstimatorConfig,
    /// Overrides on top of the environment's trainer defaults.
    pub trainer: toml::Table,
    pub table1: Table1Config,
    pub eval: EvalConfig,
    pub posterior: PosteriorConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            workers: 0,
            record_wall_time: false,
            env: EnvConfig::default(),
            estimator: EstimatorConfig::default(),
            trainer: toml::Table::new(),
            table1: Table1Config::default(),
            eval: EvalConfig::default(),
            posterior: PosteriorConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Toml(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_err)?;
        cfg.trainer()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(msg) => Error::Toml(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply `SEDKIT_<SECTION>__<KEY>=value` overrides. Values parse as
    /// TOML scalars or arrays, falling back to strings.
    pub fn with_env_overrides<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut tree = toml::Table::try_from(&self).map_err(toml_err)?;
        let mut touched = false;
        for (k, v) in vars {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            set_path(&mut tree, &path, parse_value(&v))?;
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        let cfg: Self = tree.try_into().map_err(toml_err)?;
        cfg.trainer()?;
        Ok(cfg)
    }

    /// Trainer settings: the environment's defaults with `[trainer]`
    /// overrides applied.
    pub fn trainer(&self) -> Result<TrainConfig> {
        let base = TrainConfig::for_env(&self.env.name);
        let mut tree = toml::Table::try_from(&base).map_err(toml_err)?;
        merge(&mut tree, &self.trainer);
        let mut cfg: TrainConfig = tree.try_into().map_err(toml_err)?;
        cfg.record_wall_time |= self.record_wall_time;
        if let Some(h) = self.env.horizon {
            cfg.horizon = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Conjugate prior and noise scale, when the environment is conjugate.
    pub fn conjugate_posterior(&self) -> Result<AnalyticGaussianPosterior> {
        if self.env.name != "conjugate_gaussian" {
            return Err(Error::config(format!(
                "analytic posterior needs env 'conjugate_gaussian', not '{}'",
                self.env.name
            )));
        }
        let c = &self.env.conjugate;
        let prior = IsotropicGaussian::new(vec![c.prior_mean; c.k], c.prior_var)?;
        Ok(AnalyticGaussianPosterior::new(prior, c.sigma))
    }

    pub fn build_env(&self) -> Result<Environment> {
        self.env.build(self.trainer()?.horizon)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_err)
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn parse_value(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::config("empty override key"))?;
    let mut node = tree;
    for p in parents {
        let p = &resolve_key(node, p);
        node = match node.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("override path crosses scalar key '{p}'"))),
        };
    }
    let last = resolve_key(node, last);
    node.insert(last, value);
    Ok(())
}

/// Existing key matching `k` ignoring case, else `k` itself.
fn resolve_key(node: &toml::Table, k: &str) -> String {
    node.keys()
        .find(|e| e.eq_ignore_ascii_case(k))
        .cloned()
        .unwrap_or_else(|| k.to_string())
}

/// Every default, including each environment's trainer settings, as TOML.
pub fn dump_defaults() -> Result<String> {
    let mut out = ExperimentConfig::default().to_toml()?;
    for name in ["source_location", "ces", "prey_population"] {
        let t = toml::to_string(&TrainConfig::for_env(name)).map_err(toml_err)?;
        out.push_str(&format!("\n# trainer defaults for env.name = \"{name}\"\n"));
        for line in t.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}
