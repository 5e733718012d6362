use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sedkit::harness::{dump_defaults, run, Command, ExperimentConfig, RunManifest};

/// Sequential experimental design: estimators, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "sedkit", version)]
struct Cli {
    /// TOML experiment file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Estimator accuracy on conjugate tasks (table1.csv).
    Estimate,
    /// Train one policy per seed.
    Train,
    /// EIG after each experiment (eig_curve.csv).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample actions instead of using the policy mean.
        #[arg(long)]
        stochastic: bool,
    },
    /// Sample the posterior for a recorded history (samples.csv).
    Posterior {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
        /// Exact conjugate posterior; no checkpoint needed.
        #[arg(long)]
        analytic: bool,
    },
    /// Train every ablation variant for every seed.
    Ablate,
    /// Repeat the run recorded in a manifest.
    Rerun { manifest: PathBuf },
    /// Print every default, including per-environment trainer settings.
    Defaults,
}

fn resolve(cli: &Cli) -> sedkit::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_env_overrides(std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match &cli.cmd {
        Cmd::Eval { checkpoint, stochastic } => {
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint.clone();
            }
            cfg.eval.stochastic |= stochastic;
        }
        Cmd::Posterior {
            checkpoint,
            history,
            n,
            analytic,
        } => {
            if checkpoint.is_some() {
                cfg.posterior.checkpoint = checkpoint.clone();
            }
            if history.is_some() {
                cfg.posterior.history_file = history.clone();
            }
            if let Some(n) = n {
                cfg.posterior.n = *n;
            }
            cfg.posterior.analytic |= analytic;
        }
        _ => {}
    }
    Ok(cfg)
}

fn main_inner(cli: Cli) -> sedkit::Result<()> {
    let command = match &cli.cmd {
        Cmd::Defaults => {
            print!("{}", dump_defaults()?);
            return Ok(());
        }
        Cmd::Rerun { manifest } => {
            let m = RunManifest::load(manifest)?.rerun(cli.out.as_deref())?;
            for p in &m.outputs {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Cmd::Estimate => Command::Estimate,
        Cmd::Train => Command::Train,
        Cmd::Eval { .. } => Command::Eval,
        Cmd::Posterior { .. } => Command::Posterior,
        Cmd::Ablate => Command::Ablate,
    };
    let cfg = resolve(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let m = run(command, &cfg)?;
    log::info!("inputs {}", m.input_hash);
    for p in &m.outputs {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
