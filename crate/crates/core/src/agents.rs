//! Shared recurrent agent network and decentralized action selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{GruCell, Linear};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// One network shared by all agents. Input per agent is
/// `[obs | one-hot last action | one-hot agent id]`.
#[derive(Debug, Clone)]
pub struct AgentNet {
    pub fc: Linear,
    pub gru: GruCell,
    pub head: Linear,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
}

impl AgentNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        n_actions: usize,
        n_agents: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_actions == 0 || n_agents == 0 || hidden == 0 {
            return Err(Error::Config("agent network needs actions, agents and a hidden width".into()));
        }
        let input = obs_dim + n_actions + n_agents;
        let fc = Linear::new(store, &format!("{name}.fc"), input, hidden, true, rng);
        let gru = GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng);
        let head = Linear::new(store, &format!("{name}.head"), hidden, n_actions, true, rng);
        Ok(Self { fc, gru, head, obs_dim, n_actions, n_agents })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden
    }

    /// Writes one agent's input row into `out`.
    pub fn write_input(&self, out: &mut Vec<f64>, obs: &[f64], last_action: Option<usize>, agent: usize) {
        out.extend_from_slice(obs);
        let start = out.len();
        out.resize(start + self.n_actions + self.n_agents, 0.0);
        if let Some(u) = last_action {
            out[start + u] = 1.0;
        }
        out[start + self.n_actions + agent] = 1.0;
    }

    /// Input rows for all agents of one environment step, `[n, input_dim]`.
    pub fn step_inputs(&self, obs: &[Vec<f64>], last_actions: Option<&[usize]>) -> Result<Tensor> {
        if obs.len() != self.n_agents || obs.iter().any(|o| o.len() != self.obs_dim) {
            return Err(Error::Shape(format!(
                "expected {} observations of width {}",
                self.n_agents, self.obs_dim
            )));
        }
        let mut data = Vec::with_capacity(self.n_agents * self.input_dim());
        for (a, o) in obs.iter().enumerate() {
            self.write_input(&mut data, o, last_actions.map(|u| u[a]), a);
        }
        Tensor::new(&[self.n_agents, self.input_dim()], data)
    }

    /// `inputs: [B, input_dim]`, `h: [B, H]` to `(q: [B, n_actions], h')`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, inputs: Var, h: Var) -> Result<(Var, Var)> {
        let x = tape.relu(self.fc.forward(tape, store, inputs)?);
        let h_next = self.gru.step(tape, store, x, h)?;
        let q = self.head.forward(tape, store, h_next)?;
        Ok((q, h_next))
    }
}

/// Single-agent evaluation outside any training graph.
pub fn agent_q(
    net: &AgentNet,
    store: &ParamStore,
    obs: &[f64],
    last_action_onehot: &[f64],
    agent_id_onehot: &[f64],
    hidden: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if obs.len() != net.obs_dim
        || last_action_onehot.len() != net.n_actions
        || agent_id_onehot.len() != net.n_agents
        || hidden.len() != net.hidden_dim()
    {
        return Err(Error::Shape("agent_q input widths do not match the network".into()));
    }
    let input: Vec<f64> = obs.iter().chain(last_action_onehot).chain(agent_id_onehot).cloned().collect();
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(&[1, net.input_dim()], input)?);
    let h = tape.constant(Tensor::new(&[1, net.hidden_dim()], hidden.to_vec())?);
    let (q, h) = net.forward(&tape, store, x, h)?;
    Ok((tape.data(q), tape.data(h)))
}

/// Highest available value; ties go to the lowest action index.
pub fn greedy_action(q: &[f64], avail: &[bool], agent: usize) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (u, (&v, &ok)) in q.iter().zip(avail).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(u);
        }
    }
    best.ok_or(Error::NoAvailableActions { agent })
}

/// Independent epsilon-greedy choice per agent from local quantities only.
///
/// Per agent, one uniform draw decides exploration; exploring agents then
/// draw an index among their available actions.
pub fn select_actions(q: &[Vec<f64>], avail: &[Vec<bool>], epsilon: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if q.len() != avail.len() {
        return Err(Error::Shape(format!("{} Q rows vs {} availability masks", q.len(), avail.len())));
    }
    q.iter()
        .zip(avail)
        .enumerate()
        .map(|(a, (qa, mask))| {
            if qa.len() != mask.len() {
                return Err(Error::Shape(format!("agent {a}: {} Q-values vs {} mask entries", qa.len(), mask.len())));
            }
            let open: Vec<usize> = (0..mask.len()).filter(|&u| mask[u]).collect();
            if open.is_empty() {
                return Err(Error::NoAvailableActions { agent: a });
            }
            if rng.gen::<f64>() < epsilon {
                Ok(open[rng.gen_range(0..open.len())])
            } else {
                greedy_action(qa, mask, a)
            }
        })
        .collect()
}

/// Linear anneal from `start` to `finish` over `anneal_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub finish: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, finish: 0.05, anneal_steps: 50_000 }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.start) || !unit.contains(&self.finish) {
            return Err(Error::Config("epsilon bounds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn value(&self, env_steps: u64) -> f64 {
        if self.anneal_steps == 0 || env_steps >= self.anneal_steps {
            return self.finish;
        }
        let frac = env_steps as f64 / self.anneal_steps as f64;
        self.start + (self.finish - self.start) * frac
    }
}
