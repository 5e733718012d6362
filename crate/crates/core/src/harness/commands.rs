use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::dists::{closed_form_eig, IsotropicGaussian};
use crate::env::{ConjugateGaussianTask, Environment};
use crate::error::{Error, Result};
use crate::estimators::{
    contrastive_pair, rollout_policy, sace_samples, scee, AnalyticGaussianPosterior, EstimateReport, FlowProposal,
    Proposal, RandomPolicy, RolloutSet, DEFAULT_CHUNK,
};
use crate::flows::fit_posterior;
use crate::grad::Checkpoint;
use crate::harness::config::{ConjugateTask, ExperimentConfig};
use crate::history::History;
use crate::math::mean_stderr;
use crate::rl::{train, LogRow, Trainer};
use crate::rng::Rng;

const ESTIMATORS: [&str; 4] = ["spce", "snmc", "scee", "sace"];

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn check_estimator(name: &str) -> Result<()> {
    if ESTIMATORS.contains(&name) {
        Ok(())
    } else {
        Err(Error::config(format!("unknown estimator '{name}'; expected one of {ESTIMATORS:?}")))
    }
}

/// One `table1.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Row {
    pub k: usize,
    pub prior_var: f64,
    pub sigma: f64,
    pub true_eig: f64,
    pub estimator: String,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub n: usize,
    pub seed: u64,
    pub value: f64,
    pub stderr: f64,
    pub excluded: usize,
    /// `log(L + 1)`, the sPCE ceiling; empty for other estimators.
    pub ceiling: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedTask {
    pub k: usize,
    pub prior_var: f64,
    pub sigma: f64,
    pub reason: String,
}

#[derive(Debug)]
pub struct EstimateOutput {
    pub path: PathBuf,
    pub rows: Vec<Table1Row>,
    pub skipped: Vec<SkippedTask>,
}

fn task_problem(t: &ConjugateTask) -> Option<String> {
    if t.k == 0 {
        Some("k must be at least 1".into())
    } else if !(t.prior_var.is_finite() && t.prior_var > 0.0) {
        Some(format!("prior variance {} is not positive and finite", t.prior_var))
    } else if !(t.sigma.is_finite() && t.sigma > 0.0) {
        Some(format!("noise variance {} is not positive and finite", t.sigma))
    } else {
        None
    }
}

fn estimate_task(cfg: &ExperimentConfig, task: ConjugateTask, seed: u64) -> Result<Vec<Table1Row>> {
    let t1 = &cfg.table1;
    let env = Environment::new(
        ConjugateGaussianTask::new(task.k, 0.0, task.prior_var, task.sigma)?,
        t1.observations,
    )?;
    let truth = closed_form_eig(task.k, task.prior_var, task.sigma, t1.observations);
    let root = Rng::new(seed);
    let rollouts = rollout_policy(&env, &RandomPolicy, &root.split_named("rollouts"), t1.n)?;
    let analytic = AnalyticGaussianPosterior::new(IsotropicGaussian::new(vec![0.0; task.k], task.prior_var)?, task.sigma);
    let timed = |start: Instant| cfg.record_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3);
    let row = |rep: EstimateReport, name: &str, ceiling: Option<f64>, wall_ms: Option<f64>| Table1Row {
        k: task.k,
        prior_var: task.prior_var,
        sigma: task.sigma,
        true_eig: truth,
        estimator: name.into(),
        l: rep.l,
        n: rep.n,
        seed,
        value: rep.value,
        stderr: rep.stderr,
        excluded: rep.excluded,
        ceiling,
        wall_ms,
    };

    let mut rows = Vec::new();
    let wants = |e: &str| t1.estimators.iter().any(|x| x == e);
    if wants("spce") || wants("snmc") {
        for &l in &t1.l {
            let start = Instant::now();
            let (lo, hi) = contrastive_pair(&rollouts, &env, l, &root.split_named("contrast"), t1.chunk)?;
            let wall = timed(start);
            if wants("spce") {
                rows.push(row(lo, "spce", Some(((l + 1) as f64).ln()), wall));
            }
            match (wants("snmc"), hi) {
                (true, Some(hi)) => rows.push(row(hi, "snmc", None, wall)),
                (true, None) => log::warn!("snmc skipped at L = 0"),
                _ => {}
            }
        }
    }
    // the analytic sCEE row is always reported
    let start = Instant::now();
    let rep = scee(&rollouts, &analytic, env.prior().entropy(), &env, seed)?;
    rows.push(row(rep, "scee", None, timed(start)));
    if wants("sace") {
        for &l in &t1.l {
            let start = Instant::now();
            let s = sace_samples(&rollouts, &analytic, &env, l, &root.split_named("sace"), t1.chunk)?;
            let (m, se) = mean_stderr(&s);
            let rep = EstimateReport {
                estimator: "sace".into(),
                env: env.name().into(),
                t: t1.observations,
                l: Some(l),
                n: s.len(),
                seed,
                value: m,
                stderr: se,
                excluded: 0,
                wall_ms: None,
            };
            rows.push(row(rep, "sace", None, timed(start)));
        }
    }
    if t1.learned_scee {
        let start = Instant::now();
        let data = rollout_policy(&env, &RandomPolicy, &root.split_named("flow_data"), t1.flow_samples)?;
        let thetas: Vec<Vec<f64>> = data.rollouts.iter().map(|r| r.theta.clone()).collect();
        let hs: Vec<History> = data.rollouts.into_iter().map(|r| r.history).collect();
        let (net, store, trace) = fit_posterior(&env, &t1.flow, &thetas, &hs, &t1.flow_fit, &mut root.split_named("flow_fit"))?;
        log::info!(
            "flow fit on k={} σ0={} σ={}: best held-out loss {:.4} at epoch {}",
            task.k,
            task.prior_var,
            task.sigma,
            trace.holdout[trace.best_epoch],
            trace.best_epoch
        );
        let q = FlowProposal {
            net: &net,
            store: &store,
            env: &env,
            floor: None,
        };
        let rep = scee(&rollouts, &q, env.prior().entropy(), &env, seed)?;
        rows.push(row(rep, "scee_flow", None, timed(start)));
    }
    Ok(rows)
}

/// Estimator accuracy on conjugate tasks against the closed-form EIG;
/// writes `table1.csv` and, when any task is invalid, `table1_skipped.csv`.
pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<EstimateOutput> {
    for e in &cfg.table1.estimators {
        check_estimator(e)?;
    }
    if cfg.table1.observations == 0 {
        return Err(Error::config("table1.observations must be positive"));
    }
    std::fs::create_dir_all(out)?;
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for t in &cfg.table1.tasks {
        match task_problem(t) {
            Some(reason) => {
                log::warn!("skipping task k={} σ0={} σ={}: {reason}", t.k, t.prior_var, t.sigma);
                skipped.push(SkippedTask {
                    k: t.k,
                    prior_var: t.prior_var,
                    sigma: t.sigma,
                    reason,
                });
            }
            None => jobs.extend(cfg.seeds.iter().map(|&s| (*t, s))),
        }
    }
    let results: Vec<Result<Vec<Table1Row>>> =
        pool(cfg.workers)?.install(|| jobs.par_iter().map(|&(t, s)| estimate_task(cfg, t, s)).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let path = out.join("table1.csv");
    write_csv(&path, &rows)?;
    if !skipped.is_empty() {
        write_csv(&out.join("table1_skipped.csv"), &skipped)?;
    }
    Ok(EstimateOutput { path, rows, skipped })
}

/// One training run per seed under `out/seed_<s>/`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let env = cfg.build_env()?;
    let tcfg = cfg.trainer()?;
    for w in tcfg.warn_ignored() {
        log::warn!("{w}");
    }
    let dirs: Vec<PathBuf> = cfg.seeds.iter().map(|s| out.join(format!("seed_{s}"))).collect();
    let results: Vec<Result<()>> = pool(cfg.workers)?.install(|| {
        cfg.seeds
            .par_iter()
            .zip(&dirs)
            .map(|(&seed, dir)| train(&env, &tcfg, seed, Some(dir)).map(|_| ()))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(dirs)
}

/// One `eig_curve.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub t: usize,
    pub estimator: String,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub n: usize,
    pub value: f64,
    pub stderr: f64,
}

fn load_trainer(env: &Environment, path: &Path) -> Result<Trainer> {
    let ck = Checkpoint::load(path)?;
    Trainer::from_checkpoint(env, &ck)
}

/// EIG of histories truncated at each `t = 0..=T`, for the checkpointed
/// policy or, without a checkpoint, a uniform-random one. Uses the first seed.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Vec<CurveRow>)> {
    let est = &cfg.estimator;
    check_estimator(&est.name)?;
    let seed = *cfg.seeds.first().ok_or_else(|| Error::config("no seeds configured"))?;
    let rng = Rng::new(seed);
    let env = cfg.build_env()?;
    let trainer = cfg.eval.checkpoint.as_deref().map(|p| load_trainer(&env, p)).transpose()?;
    let env = trainer.as_ref().map_or(env, |t| t.env.clone());
    let rollouts = match &trainer {
        Some(t) => rollout_policy(&env, &t.policy(!cfg.eval.stochastic), &rng.split_named("eval"), est.n)?,
        None => rollout_policy(&env, &RandomPolicy, &rng.split_named("eval"), est.n)?,
    };
    let flow = trainer.as_ref().map(|t| FlowProposal {
        net: &t.posterior,
        store: &t.kappa,
        env: &t.env,
        floor: None,
    });
    let analytic = cfg.conjugate_posterior().ok();
    let q: Option<&dyn Proposal> = match (&flow, &analytic) {
        (Some(f), _) => Some(f),
        (None, Some(a)) => Some(a),
        _ => None,
    };

    std::fs::create_dir_all(out)?;
    let mut rows = vec![CurveRow {
        t: 0,
        estimator: est.name.clone(),
        l: (est.name != "scee").then_some(est.l),
        n: est.n,
        value: 0.0,
        stderr: 0.0,
    }];
    for t in 1..=env.horizon() {
        let rs = rollouts.truncated(t);
        let rep = curve_point(&rs, &env, est.name.as_str(), est.l, q, &rng)?;
        rows.push(CurveRow {
            t,
            estimator: est.name.clone(),
            l: rep.l,
            n: rep.n,
            value: rep.value,
            stderr: rep.stderr,
        });
    }
    let path = out.join("eig_curve.csv");
    write_csv(&path, &rows)?;
    Ok((path, rows))
}

fn curve_point(rs: &RolloutSet, env: &Environment, name: &str, l: usize, q: Option<&dyn Proposal>, rng: &Rng) -> Result<EstimateReport> {
    let need_q = || q.ok_or_else(|| Error::config(format!("{name} needs a checkpoint or the conjugate environment")));
    match name {
        "spce" => Ok(contrastive_pair(rs, env, l, &rng.split_named("contrast"), DEFAULT_CHUNK)?.0),
        "snmc" => contrastive_pair(rs, env, l, &rng.split_named("contrast"), DEFAULT_CHUNK)?
            .1
            .ok_or_else(|| Error::config("snmc needs at least one contrastive sample")),
        "scee" => scee(rs, need_q()?, env.prior().entropy(), env, rng.key()),
        "sace" => {
            let s = sace_samples(rs, need_q()?, env, l, &rng.split_named("sace"), DEFAULT_CHUNK)?;
            let (m, se) = mean_stderr(&s);
            Ok(EstimateReport {
                estimator: "sace".into(),
                env: env.name().into(),
                t: rs.horizon,
                l: Some(l),
                n: s.len(),
                seed: rng.key(),
                value: m,
                stderr: se,
                excluded: 0,
                wall_ms: None,
            })
        }
        other => Err(Error::config(format!("unknown estimator '{other}'"))),
    }
}

/// Parse a history file: a header line naming the environment (`env =
/// name`, `# env: name` or the bare name), then one experiment per line with
/// design components followed by outcome components. Blank lines and later
/// `#` lines are ignored.
pub fn parse_history(text: &str, path: &Path, env: &Environment) -> Result<History> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header naming the environment".into()))?;
    let name = header
        .trim_start_matches('#')
        .trim()
        .trim_start_matches("env")
        .trim_start()
        .trim_start_matches([':', '='])
        .trim()
        .trim_matches('"');
    if name != env.name() {
        return Err(err(hline, format!("header names '{name}', expected '{}'", env.name())));
    }
    let (dd, yd) = (env.design_space().dim(), env.outcome_dim());
    let mut h = History::new();
    for (no, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| err(no, format!("'{tok}' is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != dd + yd {
            return Err(err(
                no,
                format!("expected {dd} design and {yd} outcome values, found {}", vals.len()),
            ));
        }
        let (d, y) = vals.split_at(dd);
        if !env.design_space().contains(d) {
            return Err(err(no, format!("design {d:?} is outside the design space")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(err(no, "non-finite outcome".into()));
        }
        if h.len() == env.horizon() {
            return Err(err(no, format!("more than {} experiments", env.horizon())));
        }
        h.push(d.to_vec(), y.to_vec());
    }
    Ok(h)
}

pub fn read_history(path: &Path, env: &Environment) -> Result<History> {
    parse_history(&std::fs::read_to_string(path)?, path, env)
}

/// Exchangeability check for two-source samples: `log q` after swapping
/// the first two sources, compared with the spread of `log q` itself.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub mean_abs_diff: f64,
    pub log_q_sd: f64,
    /// Mean absolute change is within two standard deviations of `log q`.
    pub within_band: bool,
}

pub fn symmetry_diagnostic(
    q: &dyn Proposal,
    h: &History,
    samples: &[Vec<f64>],
    log_q: &[f64],
    k: usize,
) -> Result<Option<SymmetryReport>> {
    if samples.len() < 2 || samples[0].len() < 2 * k {
        return Ok(None);
    }
    let swapped: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t[..2 * k].rotate_left(k);
            t
        })
        .collect();
    let refs: Vec<&[f64]> = swapped.iter().map(Vec::as_slice).collect();
    let lq_swap = q.log_q(&refs, &vec![h; refs.len()])?;
    let diffs: Vec<f64> = lq_swap.iter().zip(log_q).map(|(a, b)| (a - b).abs()).collect();
    let (mean_abs_diff, _) = mean_stderr(&diffs);
    let (_, se) = mean_stderr(log_q);
    let log_q_sd = se * (log_q.len() as f64).sqrt();
    Ok(Some(SymmetryReport {
        mean_abs_diff,
        log_q_sd,
        within_band: mean_abs_diff <= 2.0 * log_q_sd,
    }))
}

#[derive(Debug)]
pub struct PosteriorOutput {
    pub path: PathBuf,
    pub samples: Vec<Vec<f64>>,
    pub log_q: Vec<f64>,
    pub symmetry: Option<SymmetryReport>,
}

/// Draw `n` posterior samples for a recorded history into `samples.csv`
/// with columns `theta_0..theta_{k-1},log_q`.
pub fn cmd_posterior(cfg: &ExperimentConfig, out: &Path) -> Result<PosteriorOutput> {
    let pc = &cfg.posterior;
    let seed = *cfg.seeds.first().ok_or_else(|| Error::config("no seeds configured"))?;
    let env = cfg.build_env()?;
    let trainer = match (pc.analytic, pc.checkpoint.as_deref()) {
        (true, _) => None,
        (false, Some(p)) => Some(load_trainer(&env, p)?),
        (false, None) => return Err(Error::config("posterior sampling needs a checkpoint or analytic = true")),
    };
    let env = trainer.as_ref().map_or(env, |t| t.env.clone());
    let h = match pc.history_file.as_deref() {
        Some(p) => read_history(p, &env)?,
        None => History::new(),
    };
    let analytic = if pc.analytic { Some(cfg.conjugate_posterior()?) } else { None };
    let flow = trainer.as_ref().map(|t| FlowProposal {
        net: &t.posterior,
        store: &t.kappa,
        env: &t.env,
        floor: None,
    });
    let q: &dyn Proposal = match (&analytic, &flow) {
        (Some(a), _) => a,
        (None, Some(f)) => f,
        (None, None) => unreachable!("one proposal is always built"),
    };
    let samples = if pc.n == 0 {
        Vec::new()
    } else {
        q.sample(&h, pc.n, &mut Rng::new(seed).split_named("posterior"))?
    };
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    let log_q = if refs.is_empty() { Vec::new() } else { q.log_q(&refs, &vec![&h; refs.len()])? };

    std::fs::create_dir_all(out)?;
    let path = out.join("samples.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = (0..env.theta_dim()).map(|i| format!("theta_{i}")).collect();
    header.push("log_q".into());
    w.write_record(&header)?;
    for (s, lq) in samples.iter().zip(&log_q) {
        w.write_record(s.iter().chain(std::iter::once(lq)).map(|v| v.to_string()))?;
    }
    w.flush()?;

    let symmetry = if env.name() == "source_location" {
        symmetry_diagnostic(q, &h, &samples, &log_q, cfg.env.source.k)?
    } else {
        None
    };
    if let Some(s) = &symmetry {
        log::info!(
            "source swap: mean |Δ log q| = {:.4}, sd(log q) = {:.4}, within band: {}",
            s.mean_abs_diff,
            s.log_q_sd,
            s.within_band
        );
    }
    Ok(PosteriorOutput {
        path,
        samples,
        log_q,
        symmetry,
    })
}

/// A training-log row tagged with its ablation variant and seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationLogRow {
    pub variant: String,
    pub seed: u64,
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

impl AblationLogRow {
    fn new(variant: &str, seed: u64, r: &LogRow) -> Self {
        Self {
            variant: variant.into(),
            seed,
            iter: r.iter,
            return_mean: r.return_mean,
            return_stderr: r.return_stderr,
            l_q: r.l_q,
            policy_loss: r.policy_loss,
            critic_loss: r.critic_loss,
            eval_eig: r.eval_eig,
            eval_stderr: r.eval_stderr,
            wall_ms: r.wall_ms,
        }
    }
}

/// Every (variant, seed) pair trained with the same seeds; per-run logs go
/// to `out/<variant>/seed_<s>/` and all rows to `out/ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Vec<AblationLogRow>)> {
    let env = cfg.build_env()?;
    let base = cfg.trainer()?;
    let jobs: Vec<(usize, u64)> = (0..cfg.ablation.variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<Vec<AblationLogRow>>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(vi, seed)| {
                let v = &cfg.ablation.variants[vi];
                let tcfg = base.clone().with_ablation(v.use_target_posterior, v.fixed_initial_posterior);
                let dir = out.join(&v.label).join(format!("seed_{seed}"));
                std::fs::create_dir_all(&dir)?;
                let report = train(&env, &tcfg, seed, None)?;
                let rows: Vec<AblationLogRow> = report.log.iter().map(|r| AblationLogRow::new(&v.label, seed, r)).collect();
                write_csv(&dir.join("train_log.csv"), &rows)?;
                report.trainer.checkpoint()?.save(&dir.join("checkpoint.bin"))?;
                Ok(rows)
            })
            .collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    let path = out.join("ablation.csv");
    write_csv(&path, &all)?;
    Ok((path, all))
}
