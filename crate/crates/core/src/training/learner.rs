use rand::{Rng, RngCore};

use super::buffer::{Episode, EpisodeBatch};
use super::config::TrainConfig;
use crate::agents::{greedy_action, select_actions, AgentNet};
use crate::envs::DecPomdpEnv;
use crate::error::{Error, Result};
use crate::graphgen::{GraphGenerator, GraphSample};
use crate::mixers::{attention_entropy, MixInputs, Mixer};
use crate::numerics::{ParamStore, RmsProp, Tape, Tensor, Var};

/// Default bound on agent pairs per mixing chunk. Keeps the pairwise graph
/// encoder's tape to a few hundred megabytes at 25+ agents.
pub const MIX_CHUNK_PAIRS: usize = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvDims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
}

impl EnvDims {
    pub fn of(env: &dyn DecPomdpEnv) -> Self {
        Self { n_agents: env.n_agents(), obs_dim: env.obs_dim(), state_dim: env.state_dim(), n_actions: env.n_actions() }
    }
}

/// The execution-time policy: the shared agent network and nothing else.
pub struct AgentPolicy<'a> {
    net: &'a AgentNet,
    store: &'a ParamStore,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(net: &'a AgentNet, store: &'a ParamStore) -> Self {
        Self { net, store }
    }

    pub fn initial_hidden(&self) -> Tensor {
        Tensor::zeros(&[self.net.n_agents, self.net.hidden_dim()])
    }

    /// Advances `hidden` one step and picks each agent's action from its own
    /// observation, last action, id and hidden state.
    pub fn act(
        &self,
        hidden: &mut Tensor,
        obs: &[Vec<f64>],
        last_actions: Option<&[usize]>,
        avail: &[Vec<bool>],
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let tape = Tape::no_grad();
        let x = tape.constant(self.net.step_inputs(obs, last_actions)?);
        let h = tape.constant(hidden.clone());
        let (q, h) = self.net.forward(&tape, self.store, x, h)?;
        *hidden = tape.to_tensor(h);
        let q: Vec<Vec<f64>> = tape.data(q).chunks(self.net.n_actions).map(<[f64]>::to_vec).collect();
        select_actions(&q, avail, epsilon, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
    pub success: bool,
}

/// Rolls out one episode with epsilon-greedy decentralized actions.
pub fn collect_episode(
    env: &mut dyn DecPomdpEnv,
    policy: &AgentPolicy<'_>,
    epsilon: f64,
    env_rng: &mut dyn RngCore,
    action_rng: &mut impl Rng,
) -> Result<(Episode, EpisodeStats)> {
    let dims = EnvDims::of(env);
    let mut ep = Episode::new(dims.n_agents, dims.obs_dim, dims.state_dim, dims.n_actions);
    let mut snap = env.reset(env_rng);
    let mut hidden = policy.initial_hidden();
    let mut last: Option<Vec<usize>> = None;
    loop {
        let u = policy.act(&mut hidden, &snap.obs, last.as_deref(), &snap.avail, epsilon, action_rng)?;
        ep.states.push(snap.state.clone());
        ep.obs.push(snap.obs.concat());
        ep.avail.push(snap.avail.concat());
        let out = env.step(&u)?;
        ep.actions.push(u.clone());
        ep.rewards.push(out.reward);
        ep.terminal.push(out.terminated && !out.time_limit);
        snap = out.next;
        last = Some(u);
        if out.terminated || ep.len() >= env.episode_limit() {
            break;
        }
    }
    ep.states.push(snap.state);
    ep.obs.push(snap.obs.concat());
    ep.avail.push(snap.avail.concat());
    let stats = EpisodeStats { episode_return: ep.total_reward(), length: ep.len(), success: env.is_success() };
    Ok((ep, stats))
}

/// Online forward pass over the filled rows of a batch.
pub struct Forward {
    /// `[R]`, rows in [`EpisodeBatch::rows`] order.
    pub q_tot: Var,
    pub graph: Option<GraphSample>,
    pub attention: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub sparsity: Option<f64>,
    pub attention_entropy: Option<f64>,
    pub synced: bool,
}

/// Parameters, target copy and optimizer for one run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: TrainConfig,
    pub dims: EnvDims,
    pub store: ParamStore,
    pub target: ParamStore,
    pub agent: AgentNet,
    pub graph: Option<GraphGenerator>,
    pub mixer: Mixer,
    pub optimizer: RmsProp,
    pub train_steps: u64,
    pub last_sync: u64,
    /// Upper bound on agent pairs per mixing chunk during training.
    pub mix_chunk_pairs: usize,
}

impl Learner {
    pub fn new(config: TrainConfig, dims: EnvDims, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let agent = AgentNet::new(&mut store, "agent", dims.obs_dim, dims.n_actions, dims.n_agents, config.agent_hidden, rng)?;
        let graph = if config.algo.uses_graph() {
            Some(GraphGenerator::new(&mut store, "graph", dims.obs_dim, config.graph, rng)?)
        } else {
            None
        };
        let mixer = Mixer::new(&mut store, "mixer", config.algo, dims.n_agents, dims.obs_dim, dims.state_dim, config.mixer, rng)?;
        let optimizer = RmsProp::new(config.optimizer, &store);
        let target = store.clone();
        Ok(Self { config, dims, store, target, agent, graph, mixer, optimizer, train_steps: 0, last_sync: 0, mix_chunk_pairs: MIX_CHUNK_PAIRS })
    }

    pub fn policy(&self) -> AgentPolicy<'_> {
        AgentPolicy::new(&self.agent, &self.store)
    }

    pub fn sync_target(&mut self) {
        self.target.copy_values_from(&self.store).expect("target layout mirrors the online store");
        self.last_sync = self.train_steps;
    }

    /// Agent Q-values for steps `0..steps`; at step `t` only the episodes in
    /// the prefix of `order` with `alive(len, t)` are evaluated.
    fn unroll(
        &self,
        tape: &Tape,
        store: &ParamStore,
        batch: &EpisodeBatch,
        order: &[usize],
        steps: usize,
        alive: impl Fn(usize, usize) -> bool,
    ) -> Result<Vec<(usize, Var)>> {
        let n = self.dims.n_agents;
        let o = self.dims.obs_dim;
        let mut h = tape.constant(Tensor::zeros(&[order.len() * n, self.agent.hidden_dim()]));
        let mut rows = order.len();
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let count = order.iter().take_while(|&&b| alive(batch.lengths[b], t)).count();
            if count < rows {
                h = tape.slice(h, 0, 0, count * n);
                rows = count;
            }
            let mut data = Vec::with_capacity(count * n * self.agent.input_dim());
            for &b in &order[..count] {
                let obs = batch.obs(b, t);
                for a in 0..n {
                    let last = (t > 0).then(|| batch.actions(b, t - 1)[a]);
                    self.agent.write_input(&mut data, &obs[a * o..(a + 1) * o], last, a);
                }
            }
            let x = tape.constant(Tensor::new(&[count * n, self.agent.input_dim()], data)?);
            let (q, h_next) = self.agent.forward(tape, store, x, h)?;
            h = h_next;
            out.push((count, q));
        }
        Ok(out)
    }

    fn mix_rows(
        &self,
        tape: &Tape,
        store: &ParamStore,
        q: Var,
        obs: Vec<f64>,
        state: Vec<f64>,
        graph_rng: &mut impl Rng,
    ) -> Result<(Var, Option<GraphSample>, Option<Var>)> {
        let r = tape.shape(q)[0];
        let d = self.dims;
        let obs = tape.constant(Tensor::new(&[r, d.n_agents, d.obs_dim], obs)?);
        let state = tape.constant(Tensor::new(&[r, d.state_dim], state)?);
        let graph = match &self.graph {
            Some(g) => Some(g.generate(tape, store, obs, graph_rng)?),
            None => None,
        };
        let inputs = MixInputs {
            q,
            obs: self.mixer.attention.is_some().then_some(obs),
            state,
            adjacency: graph.as_ref().map(|g| g.adjacency),
        };
        let out = self.mixer.mix(tape, store, &inputs)?;
        Ok((out.q_tot, graph, out.attention))
    }

    /// Rows per mixing chunk, sized so that one chunk holds at most
    /// `mix_chunk_pairs` agent pairs.
    fn chunk_rows(&self) -> usize {
        (self.mix_chunk_pairs / (self.dims.n_agents * self.dims.n_agents)).max(1)
    }

    /// Chosen-action Q-values `[R, n]` on `tape` with the matching
    /// observations and states, rows in [`EpisodeBatch::rows`] order.
    fn online_rows(&self, tape: &Tape, batch: &EpisodeBatch) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check_batch(batch)?;
        let order = batch.order();
        let longest = batch.lengths.iter().copied().max().unwrap_or(0);
        let steps = self.unroll(tape, &self.store, batch, &order, longest, |len, t| len > t)?;
        let mut chosen = Vec::with_capacity(steps.len());
        let (mut obs, mut state) = (Vec::new(), Vec::new());
        for (t, &(count, q)) in steps.iter().enumerate() {
            let idx: Vec<usize> = order[..count].iter().flat_map(|&b| batch.actions(b, t).to_vec()).collect();
            chosen.push(tape.reshape(tape.pick(q, &idx), &[count, self.dims.n_agents]));
            for &b in &order[..count] {
                obs.extend_from_slice(batch.obs(b, t));
                state.extend_from_slice(batch.state(b, t));
            }
        }
        Ok((tape.concat(&chosen, 0), obs, state))
    }

    /// `Q_tot(tau^t, u^t)` under the online parameters, on a single tape.
    pub fn forward(&self, tape: &Tape, batch: &EpisodeBatch, graph_rng: &mut impl Rng) -> Result<Forward> {
        let (q, obs, state) = self.online_rows(tape, batch)?;
        let (q_tot, graph, attention) = self.mix_rows(tape, &self.store, q, obs, state, graph_rng)?;
        Ok(Forward { q_tot, graph, attention })
    }

    /// `y = r + gamma * max Q_tot^-(tau', u')` per filled row, with the
    /// bootstrap dropped at absorbing ends.
    pub fn td_targets(&self, batch: &EpisodeBatch, graph_rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let rows = batch.rows();
        let mut y: Vec<f64> = rows.iter().map(|&(b, t)| batch.reward(b, t)).collect();
        let open: Vec<usize> = (0..rows.len()).filter(|&k| !batch.is_terminal(rows[k].0, rows[k].1)).collect();
        if open.is_empty() {
            return Ok(y);
        }
        let order = batch.order();
        let mut position = vec![0; batch.size];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }
        let longest = batch.lengths.iter().copied().max().unwrap_or(0);
        let values: Vec<Tensor> = {
            let tape = Tape::no_grad();
            let steps = self.unroll(&tape, &self.target, batch, &order, longest + 1, |len, t| len >= t)?;
            steps.iter().map(|&(_, q)| tape.to_tensor(q)).collect()
        };
        let d = self.dims;
        let (mut q_next, mut obs, mut state) = (Vec::new(), Vec::new(), Vec::new());
        for &k in &open {
            let (b, t) = rows[k];
            let q = &values[t + 1];
            let avail = batch.avail(b, t + 1);
            for a in 0..d.n_agents {
                let row = (position[b] * d.n_agents + a) * d.n_actions;
                let qa = &q.data()[row..row + d.n_actions];
                let mask = &avail[a * d.n_actions..(a + 1) * d.n_actions];
                q_next.push(qa[greedy_action(qa, mask, a)?]);
            }
            obs.extend_from_slice(batch.obs(b, t + 1));
            state.extend_from_slice(batch.state(b, t + 1));
        }
        let (n, o, sd) = (d.n_agents, d.obs_dim, d.state_dim);
        let chunk = self.chunk_rows();
        for start in (0..open.len()).step_by(chunk) {
            let len = chunk.min(open.len() - start);
            let tape = Tape::no_grad();
            let q = tape.constant(Tensor::new(&[len, n], q_next[start * n..(start + len) * n].to_vec())?);
            let (q_tot, _, _) = self.mix_rows(
                &tape,
                &self.target,
                q,
                obs[start * n * o..(start + len) * n * o].to_vec(),
                state[start * sd..(start + len) * sd].to_vec(),
                graph_rng,
            )?;
            for (&k, v) in open[start..start + len].iter().zip(tape.data(q_tot)) {
                y[k] += self.config.gamma * v;
            }
        }
        Ok(y)
    }

    /// Mean squared TD error against fixed `targets`, on a single tape.
    pub fn td_loss(&self, tape: &Tape, batch: &EpisodeBatch, targets: &[f64], graph_rng: &mut impl Rng) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, batch, graph_rng)?;
        if targets.len() != tape.shape(fwd.q_tot)[0] {
            return Err(Error::Shape(format!("{} targets for {:?} rows", targets.len(), tape.shape(fwd.q_tot))));
        }
        let diff = tape.sub(fwd.q_tot, tape.constant(Tensor::vector(targets.to_vec())));
        let loss = tape.mean(tape.mul(diff, diff), 0);
        Ok((loss, fwd))
    }

    /// Loss and parameter gradients (left in `self.store`) of the TD loss
    /// against `targets`. Graph generation and mixing run in row chunks on
    /// their own tapes; each chunk's gradient with respect to its Q-values
    /// is then pulled back through the agent unroll in one pass.
    pub fn loss_and_grads(
        &mut self,
        batch: &EpisodeBatch,
        targets: &[f64],
        graph_rng: &mut impl Rng,
    ) -> Result<(f64, Option<f64>, Option<f64>)> {
        let tape = Tape::new();
        let (q, obs, state) = self.online_rows(&tape, batch)?;
        let q_val = tape.to_tensor(q);
        let (r, n) = (q_val.shape()[0], self.dims.n_agents);
        if targets.len() != r {
            return Err(Error::Shape(format!("{} targets for {r} rows", targets.len())));
        }
        let (o, sd) = (self.dims.obs_dim, self.dims.state_dim);
        self.store.zero_grad();
        let mut grad_q = vec![0.0; r * n];
        let mut loss = 0.0;
        let (mut sparsity, mut entropy) = (None::<f64>, None::<f64>);
        let chunk = self.chunk_rows();
        for start in (0..r).step_by(chunk) {
            let len = chunk.min(r - start);
            let sub = Tape::new();
            let qc = sub.leaf(Tensor::new(&[len, n], q_val.data()[start * n..(start + len) * n].to_vec())?);
            let (q_tot, graph, attention) = self.mix_rows(
                &sub,
                &self.store,
                qc,
                obs[start * n * o..(start + len) * n * o].to_vec(),
                state[start * sd..(start + len) * sd].to_vec(),
                graph_rng,
            )?;
            let diff = sub.sub(q_tot, sub.constant(Tensor::vector(targets[start..start + len].to_vec())));
            let part = sub.scale(sub.sum_all(sub.mul(diff, diff)), 1.0 / r as f64);
            loss += sub.item(part);
            sub.backward(part)?;
            sub.accumulate_param_grads(&mut self.store);
            if let Some(g) = sub.grad(qc) {
                grad_q[start * n..(start + len) * n].copy_from_slice(g.data());
            }
            let weight = len as f64 / r as f64;
            if let Some(g) = &graph {
                *sparsity.get_or_insert(0.0) += weight * g.sparsity();
            }
            if let Some(w) = attention {
                *entropy.get_or_insert(0.0) += weight * attention_entropy(&sub.to_tensor(w));
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at train step {}", self.train_steps)));
        }
        let pull = tape.sum_all(tape.mul(q, tape.constant(Tensor::new(&[r, n], grad_q)?)));
        tape.backward(pull)?;
        tape.accumulate_param_grads(&mut self.store);
        Ok((loss, sparsity, entropy))
    }

    /// One optimizer step on `batch`. Graph samples for the targets are drawn
    /// before those for the online pass.
    pub fn train_step(&mut self, batch: &EpisodeBatch, graph_rng: &mut impl Rng) -> Result<TrainStats> {
        let y = self.td_targets(batch, graph_rng)?;
        let (loss, sparsity, attention_entropy) = self.loss_and_grads(batch, &y, graph_rng)?;
        let grad_norm = self.optimizer.step(&mut self.store)?;
        self.train_steps += 1;
        let synced = self.train_steps - self.last_sync >= self.config.target_update_interval;
        if synced {
            self.sync_target();
        }
        Ok(TrainStats { loss, grad_norm, sparsity, attention_entropy, synced })
    }

    fn check_batch(&self, batch: &EpisodeBatch) -> Result<()> {
        let d = self.dims;
        if (batch.n_agents, batch.obs_dim, batch.state_dim, batch.n_actions)
            != (d.n_agents, d.obs_dim, d.state_dim, d.n_actions)
        {
            return Err(Error::Shape("batch dimensions do not match the learner".into()));
        }
        Ok(())
    }
}
