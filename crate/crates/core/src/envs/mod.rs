//! Decentralized partially observable environments.

mod matrix;
mod spread;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};

pub use matrix::MatrixGame;
pub use spread::{SpreadConfig, SpreadGrid};

/// Everything the learner sees after a reset or a step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub state: Vec<f64>,
    /// One observation vector per agent.
    pub obs: Vec<Vec<f64>>,
    /// One availability mask per agent.
    pub avail: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Shared by all agents.
    pub reward: f64,
    /// The episode is over, for any reason.
    pub terminated: bool,
    /// The episode ended only because it reached `episode_limit`; the final
    /// state is not absorbing and may be bootstrapped from.
    pub time_limit: bool,
    pub next: EnvSnapshot,
}

pub trait DecPomdpEnv: Send {
    fn n_agents(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn episode_limit(&self) -> usize;

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvSnapshot;

    /// Errors on unavailable actions, wrong arity, or stepping a finished episode.
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome>;

    fn snapshot(&self) -> EnvSnapshot;

    /// Task-specific success flag for the current (usually final) state.
    fn is_success(&self) -> bool;
}

pub(crate) fn check_actions(actions: &[usize], avail: &[Vec<bool>]) -> Result<()> {
    if actions.len() != avail.len() {
        return Err(Error::Env(format!("expected {} actions, got {}", avail.len(), actions.len())));
    }
    for (a, (&u, mask)) in actions.iter().zip(avail).enumerate() {
        if !mask.get(u).copied().unwrap_or(false) {
            return Err(Error::Env(format!("action {u} is not available to agent {a}")));
        }
    }
    Ok(())
}

/// Named environment configurations.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Matrix,
    Spread(SpreadConfig),
}

impl EnvSpec {
    pub const NAMES: [&'static str; 5] = ["matrix", "spread5", "spread8", "spread25", "spread27"];

    pub fn build(&self) -> Result<Box<dyn DecPomdpEnv>> {
        Ok(match self {
            EnvSpec::Matrix => Box::new(MatrixGame::default()),
            EnvSpec::Spread(c) => Box::new(SpreadGrid::new(c.clone())?),
        })
    }

    pub fn name(&self) -> String {
        match self {
            EnvSpec::Matrix => "matrix".into(),
            EnvSpec::Spread(c) => c.name.clone(),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(EnvSpec::Matrix),
            _ => SpreadConfig::scenario(s).map(EnvSpec::Spread).ok_or_else(|| {
                Error::Config(format!("unknown environment `{s}` (valid: {})", Self::NAMES.join(", ")))
            }),
        }
    }
}
