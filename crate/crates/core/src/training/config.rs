use serde::{Deserialize, Serialize};

use crate::agents::EpsilonSchedule;
use crate::error::{Error, Result};
use crate::graphgen::GraphGenConfig;
use crate::mixers::{MixerConfig, MixerKind};
use crate::numerics::RmsPropConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: MixerKind,
    pub seed: u64,
    pub total_env_steps: u64,
    pub gamma: f64,
    /// Episodes per mini-batch.
    pub batch_size: usize,
    /// Episodes held by the replay buffer.
    pub buffer_capacity: usize,
    /// Train steps between target syncs.
    pub target_update_interval: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: u64,
    pub agent_hidden: usize,
    pub epsilon: EpsilonSchedule,
    pub optimizer: RmsPropConfig,
    pub graph: GraphGenConfig,
    pub mixer: MixerConfig,
    /// Write elapsed seconds into the metrics rows. Off by default so that
    /// reruns produce identical files; timings always go to `timing.jsonl`.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: MixerKind::Dagmix,
            seed: 0,
            total_env_steps: 0,
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 5000,
            target_update_interval: 200,
            eval_interval: 2000,
            eval_episodes: 32,
            checkpoint_interval: 50_000,
            agent_hidden: 64,
            epsilon: EpsilonSchedule::default(),
            optimizer: RmsPropConfig::default(),
            graph: GraphGenConfig::default(),
            mixer: MixerConfig::default(),
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(Error::Config(format!(
                "batch size {} must be positive and at most the buffer capacity {}",
                self.batch_size, self.buffer_capacity
            )));
        }
        if self.target_update_interval == 0 || self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.agent_hidden == 0 {
            return Err(Error::Config("agent hidden width must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0) || !(0.0..1.0).contains(&o.alpha) || !(o.eps > 0.0) || !(o.grad_norm_clip > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.epsilon.validate()?;
        self.graph.validate()?;
        self.mixer.validate()
    }
}
