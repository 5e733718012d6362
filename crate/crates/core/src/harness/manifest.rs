use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::commands::{cmd_ablate, cmd_estimate, cmd_eval, cmd_posterior, cmd_train};
use crate::harness::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Train,
    Eval,
    Posterior,
    Ablate,
}

/// Record of one command run: the resolved config, a content hash of every
/// input and the files written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    pub version: String,
    /// `sha256:` over git-style blobs of the config and input files.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub config: String,
}

fn blob(h: &mut Sha256, bytes: &[u8]) {
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
}

fn input_files(command: Command, cfg: &ExperimentConfig) -> Vec<&Path> {
    match command {
        Command::Eval => cfg.eval.checkpoint.as_deref().into_iter().collect(),
        Command::Posterior => [cfg.posterior.checkpoint.as_deref(), cfg.posterior.history_file.as_deref()]
            .into_iter()
            .flatten()
            .collect(),
        _ => Vec::new(),
    }
}

/// The output directory is left out so reruns elsewhere hash the same.
fn input_hash(command: Command, cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    blob(&mut h, format!("{command:?}").as_bytes());
    let placed = ExperimentConfig {
        out_dir: PathBuf::new(),
        ..cfg.clone()
    };
    blob(&mut h, placed.to_toml()?.as_bytes());
    for p in input_files(command, cfg) {
        blob(&mut h, &std::fs::read(p)?);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

/// Run `command` into `cfg.out_dir` and write its manifest there.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<RunManifest> {
    let config = cfg.to_toml()?;
    let input_hash = input_hash(command, cfg)?;
    let out = cfg.out_dir.as_path();
    let mut outputs = match command {
        Command::Estimate => {
            let o = cmd_estimate(cfg, out)?;
            let mut v = vec![o.path];
            if !o.skipped.is_empty() {
                v.push(out.join("table1_skipped.csv"));
            }
            v
        }
        Command::Train => cmd_train(cfg, out)?
            .into_iter()
            .flat_map(|d| [d.join("train_log.csv"), d.join("checkpoint.bin")])
            .collect(),
        Command::Eval => vec![cmd_eval(cfg, out)?.0],
        Command::Posterior => vec![cmd_posterior(cfg, out)?.path],
        Command::Ablate => {
            let (path, _) = cmd_ablate(cfg, out)?;
            let mut v: Vec<PathBuf> = cfg
                .ablation
                .variants
                .iter()
                .flat_map(|var| cfg.seeds.iter().map(move |s| out.join(&var.label).join(format!("seed_{s}"))))
                .flat_map(|d| [d.join("train_log.csv"), d.join("checkpoint.bin")])
                .collect();
            v.push(path);
            v
        }
    };
    outputs.sort();
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION").into(),
        input_hash,
        outputs,
        config,
    };
    m.save(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Toml(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config)
    }

    /// Re-run the recorded command, optionally into another directory.
    /// Fails if any input file changed since the manifest was written.
    pub fn rerun(&self, out_dir: Option<&Path>) -> Result<RunManifest> {
        let cfg = self.experiment()?;
        let now = input_hash(self.command, &cfg)?;
        if now != self.input_hash {
            return Err(Error::config(format!(
                "inputs changed since the manifest was written ({} vs {now})",
                self.input_hash
            )));
        }
        let cfg = match out_dir {
            Some(d) => ExperimentConfig {
                out_dir: d.to_path_buf(),
                ..cfg
            },
            None => cfg,
        };
        run(self.command, &cfg)
    }
}
