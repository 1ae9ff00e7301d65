//! Episode collection, replay, TD learning with target networks, and the
//! outer run loop.

mod buffer;
mod config;
mod learner;
mod run;

pub use buffer::{Episode, EpisodeBatch, ReplayBuffer};
pub use config::TrainConfig;
pub use learner::{collect_episode, AgentPolicy, EnvDims, EpisodeStats, Forward, Learner, TrainStats};
pub use run::{evaluate, run, EvalSummary, MetricsRow, RunRngs, Trainer};
