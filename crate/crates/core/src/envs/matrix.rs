use rand::RngCore;

use super::{check_actions, DecPomdpEnv, EnvSnapshot, StepOutcome};
use crate::error::{Error, Result};

/// Two-agent, one-step cooperative game with a shared payoff table.
#[derive(Debug, Clone)]
pub struct MatrixGame {
    payoff: Vec<Vec<f64>>,
    done: bool,
    last_reward: Option<f64>,
}

impl Default for MatrixGame {
    fn default() -> Self {
        Self::new(vec![vec![12.0, 0.0, 0.0], vec![0.0, 6.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap()
    }
}

impl MatrixGame {
    pub fn new(payoff: Vec<Vec<f64>>) -> Result<Self> {
        let k = payoff.len();
        if k == 0 || payoff.iter().any(|row| row.len() != k) {
            return Err(Error::Env("payoff must be a non-empty square table".into()));
        }
        Ok(Self { payoff, done: false, last_reward: None })
    }

    pub fn payoff(&self) -> &[Vec<f64>] {
        &self.payoff
    }

    /// Best joint action by exhaustive enumeration; the first maximum in
    /// row-major order wins ties.
    pub fn oracle_optimal(&self) -> (f64, [usize; 2]) {
        let mut best = (f64::NEG_INFINITY, [0, 0]);
        for (i, row) in self.payoff.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, [i, j]);
                }
            }
        }
        best
    }
}

impl DecPomdpEnv for MatrixGame {
    fn n_agents(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn n_actions(&self) -> usize {
        self.payoff.len()
    }

    fn episode_limit(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> EnvSnapshot {
        self.done = false;
        self.last_reward = None;
        self.snapshot()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        check_actions(actions, &self.snapshot().avail)?;
        let reward = self.payoff[actions[0]][actions[1]];
        self.done = true;
        self.last_reward = Some(reward);
        Ok(StepOutcome { reward, terminated: true, time_limit: false, next: self.snapshot() })
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: vec![1.0],
            obs: vec![vec![1.0]; 2],
            avail: vec![vec![true; self.payoff.len()]; 2],
        }
    }

    fn is_success(&self) -> bool {
        self.last_reward == Some(self.oracle_optimal().0)
    }
}
