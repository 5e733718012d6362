//! The sequential-design MDP and an off-policy actor-critic trainer whose
//! rewards come from a learned posterior.

mod agent;
mod buffer;
mod config;
mod mdp;
mod train;

pub use agent::{ActionSpace, Agent, AgentLosses, TrainedPolicy};
pub use buffer::{ReplayBuffer, ReplayEntry, Transition};
pub use config::{EvalEstimator, RewardMode, TrainConfig};
pub use mdp::{
    scee_reward, spce_reward, step_batch, step_mdp, ContrastState, Embedder, PosteriorEmbedder, RewardPosterior,
    SedMdpState, ZeroEmbedder, LOG_Q_FLOOR,
};
pub use train::{train, write_log, LogRow, TrainReport, Trainer, UpdateStats};

pub use crate::flows::polyak_update;
