//! Experiment configuration, orchestration and CSV reports.

mod commands;
mod config;
mod manifest;

pub use commands::{
    cmd_ablate, cmd_estimate, cmd_eval, cmd_posterior, cmd_train, parse_history, read_history, symmetry_diagnostic,
    AblationLogRow, CurveRow, EstimateOutput, PosteriorOutput, SkippedTask, SymmetryReport, Table1Row,
};
pub use config::{
    dump_defaults, AblationConfig, AblationVariant, CesParams, ConjugateParams, ConjugateTask, EnvConfig, EstimatorConfig,
    EvalConfig, ExperimentConfig, PosteriorConfig, PreyParams, SourceParams, Table1Config, ENV_PREFIX,
};
pub use manifest::{run, Command, RunManifest, MANIFEST_FILE};

#[cfg(test)]
mod tests;
