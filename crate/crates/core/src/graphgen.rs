//! Per-timestep agent graph generation.
//!
//! Each agent's observation is embedded, every ordered pair `(x_i, x_j)` is
//! concatenated, and for each query agent `i` the sequence
//! `(x_i, x_1), ..., (x_i, x_n)` is read by a bidirectional GRU. A fully
//! connected head turns position `j` into two logits, and a two-way
//! Gumbel-softmax with straight-through hardening decides the edge `j -> i`.
//! Self-loops are always present.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{bigru_states_projected, Activation, GruCell, Linear, Mlp, MlpSpec};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// How the two edge logits are perturbed before the tempered softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// i.i.d. Gumbel(0, 1) noise added to each logit.
    StandardGumbel,
    /// Deterministic: each logit `x` becomes `x + ln(lambda * exp(-lambda * x))`.
    ExponentialLogDensity,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 2] = [NoiseMode::StandardGumbel, NoiseMode::ExponentialLogDensity];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::StandardGumbel => "standard_gumbel",
            NoiseMode::ExponentialLogDensity => "exponential_log_density",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown noise mode `{s}` (expected one of: standard_gumbel, exponential_log_density)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphGenConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub tau: f64,
    pub lambda: f64,
    pub noise_mode: NoiseMode,
}

impl Default for GraphGenConfig {
    fn default() -> Self {
        Self { embed_dim: 32, hidden: 32, tau: 0.5, lambda: 1.0, noise_mode: NoiseMode::StandardGumbel }
    }
}

impl GraphGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("gumbel temperature must be > 0, got {}", self.tau)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("exponential rate must be > 0, got {}", self.lambda)));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("graph generator widths must be positive".into()));
        }
        Ok(())
    }
}

/// One `n x n` agent graph; entry `(i, j)` is the edge from agent `j` to agent `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<f64>,
    hard: bool,
}

impl AdjacencyMatrix {
    pub fn new(n: usize, entries: Vec<f64>, hard: bool) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Shape(format!("adjacency for {n} agents needs {} entries", n * n)));
        }
        if hard && entries.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Shape("hard adjacency entries must be 0 or 1".into()));
        }
        Ok(Self { n, entries, hard })
    }

    /// Hard graph with the given edges plus forced self-loops.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        for &(i, j) in edges {
            entries[i * n + j] = 1.0;
        }
        Self { n, entries, hard: true }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_edges(n, &[])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// `N(i)`: agents with an edge into `i`.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j) != 0.0).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.n], self.entries.clone())
    }

    /// Fraction of zero off-diagonal entries.
    pub fn sparsity(&self) -> f64 {
        sparsity_of(&self.entries, self.n)
    }
}

/// All-ones graph used by the fully connected ablation.
pub fn full_adjacency(n: usize) -> Result<AdjacencyMatrix> {
    if n == 0 {
        return Err(Error::Shape("adjacency needs at least one agent".into()));
    }
    Ok(AdjacencyMatrix { n, entries: vec![1.0; n * n], hard: true })
}

/// Fraction of zero off-diagonal entries over a stack of `n x n` graphs.
pub fn sparsity_of(entries: &[f64], n: usize) -> f64 {
    if n < 2 || entries.is_empty() {
        return 0.0;
    }
    let mut zeros = 0usize;
    let mut total = 0usize;
    for (k, &v) in entries.iter().enumerate() {
        let (i, j) = ((k / n) % n, k % n);
        if i != j {
            total += 1;
            zeros += usize::from(v == 0.0);
        }
    }
    zeros as f64 / total as f64
}

/// A batch of sampled graphs.
#[derive(Debug)]
pub struct GraphSample {
    /// `[M, n, n]`: hard values forward, soft edge probabilities backward.
    pub adjacency: Var,
    /// `[M, n, n]` hard 0/1 values, self-loops set.
    pub hard: Tensor,
    /// `[M, n, n, 2]` tempered softmax outputs per pair (before self-loop override).
    pub soft: Tensor,
}

impl GraphSample {
    pub fn n(&self) -> usize {
        self.hard.shape()[1]
    }

    pub fn matrices(&self) -> Vec<AdjacencyMatrix> {
        let n = self.n();
        self.hard
            .data()
            .chunks(n * n)
            .map(|c| AdjacencyMatrix { n, entries: c.to_vec(), hard: true })
            .collect()
    }

    pub fn sparsity(&self) -> f64 {
        sparsity_of(self.hard.data(), self.n())
    }
}

/// Draws one standard Gumbel variate, `-ln(-ln U)` with `U` in (0, 1).
pub fn gumbel_noise(rng: &mut (impl Rng + ?Sized)) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

#[derive(Debug, Clone)]
pub struct GraphGenerator {
    pub config: GraphGenConfig,
    pub embed: Mlp,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub head: Linear,
    pub obs_dim: usize,
}

impl GraphGenerator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        config: GraphGenConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let embed = Mlp::new(
            store,
            &format!("{name}.embed"),
            MlpSpec::new(vec![obs_dim, e], vec![Activation::Relu])?,
            rng,
        );
        let fwd = GruCell::new(store, &format!("{name}.gru_fwd"), 2 * e, config.hidden, rng);
        let bwd = GruCell::new(store, &format!("{name}.gru_bwd"), 2 * e, config.hidden, rng);
        let head = Linear::new(store, &format!("{name}.head"), 2 * config.hidden, 2, true, rng);
        Ok(Self { config, embed, fwd, bwd, head, obs_dim })
    }

    /// `obs: [M, n, O] -> [M, n, E]`, shared weights across agents.
    pub fn embed_observations(&self, tape: &Tape, store: &ParamStore, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs);
        if shape.len() != 3 || shape[2] != self.obs_dim {
            return Err(Error::Shape(format!(
                "graph generator expects observations [M, n, {}], got {shape:?}",
                self.obs_dim
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::Shape("graph generation needs at least one agent".into()));
        }
        let flat = tape.reshape(obs, &[m * n, self.obs_dim]);
        let x = self.embed.forward(tape, store, flat)?;
        Ok(tape.reshape(x, &[m, n, self.config.embed_dim]))
    }

    /// `x: [M, n, E] -> [M, n, n, 2]`, logits for every ordered pair.
    pub fn pairwise_logits(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let e = self.config.embed_dim;
        if shape.len() != 3 || shape[2] != e {
            return Err(Error::Shape(format!("pairwise logits expect [M, n, {e}], got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::Shape("pairwise logits need at least one agent".into()));
        }
        let rows = m * n;
        let x2 = tape.reshape(x, &[rows, e]);
        // (x_i, x_j) W_ih = x_i W_ih[:E] + x_j W_ih[E:], so the input projection
        // is computed per agent once instead of per pair.
        let project = |cell: &GruCell| -> Vec<Var> {
            let w = tape.param(store, cell.w_ih);
            let query = tape.add(
                tape.matmul(x2, tape.slice(w, 0, 0, e)),
                tape.param(store, cell.b_ih),
            );
            let key = tape.matmul(x2, tape.slice(w, 0, e, e));
            (0..n)
                .map(|j| {
                    let idx: Vec<usize> = (0..rows).map(|r| (r / n) * n + j).collect();
                    tape.add(query, tape.gather_rows(key, &idx))
                })
                .collect()
        };
        let fwd_proj = project(&self.fwd);
        let bwd_proj = project(&self.bwd);
        let (fs, bs) = bigru_states_projected(tape, store, &self.fwd, &self.bwd, &fwd_proj, &bwd_proj, rows)?;
        let h = self.config.hidden;
        let stack = |states: &[Var]| tape.reshape(tape.concat(states, 1), &[rows * n, h]);
        let joined = tape.concat(&[stack(&fs), stack(&bs)], 1);
        let logits = self.head.forward(tape, store, joined)?;
        Ok(tape.reshape(logits, &[m, n, n, 2]))
    }

    /// Samples hard graphs from `logits: [M, n, n, 2]`.
    ///
    /// In `StandardGumbel` mode one Gumbel variate is drawn per logit in
    /// row-major order of `logits`. The edge is on when the second softmax
    /// component is strictly larger; self-loops are then forced on.
    pub fn sample_adjacency(&self, tape: &Tape, logits: Var, rng: &mut impl Rng) -> Result<GraphSample> {
        self.config.validate()?;
        let shape = tape.shape(logits);
        if shape.len() != 4 || shape[1] != shape[2] || shape[3] != 2 {
            return Err(Error::Shape(format!("edge logits must be [M, n, n, 2], got {shape:?}")));
        }
        if tape.value(logits).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite edge logits".into()));
        }
        let (m, n) = (shape[0], shape[1]);
        let GraphGenConfig { tau, lambda, noise_mode, .. } = self.config;
        let tempered = match noise_mode {
            NoiseMode::StandardGumbel => {
                let noise: Vec<f64> = (0..m * n * n * 2).map(|_| gumbel_noise(rng)).collect();
                let noisy = tape.add(logits, tape.constant(Tensor::from_parts(shape.clone(), noise)));
                tape.scale(noisy, 1.0 / tau)
            }
            // x + ln(lambda) - lambda x
            NoiseMode::ExponentialLogDensity => tape.affine(logits, (1.0 - lambda) / tau, lambda.ln() / tau),
        };
        let soft = tape.softmax(tempered, 3, None)?;
        let edge_prob = tape.reshape(tape.slice(soft, 3, 1, 1), &[m, n, n]);
        let soft_t = tape.to_tensor(soft);
        let hard: Vec<f64> = soft_t
            .data()
            .chunks(2)
            .map(|p| if p[1] > p[0] { 1.0 } else { 0.0 })
            .collect();
        let st = tape.straight_through(edge_prob, Tensor::from_parts(vec![m, n, n], hard));
        let diag: Vec<bool> = (0..m * n * n).map(|k| (k / n) % n == k % n).collect();
        let adjacency = tape.masked_fill(st, &diag, 1.0);
        let hard = tape.to_tensor(adjacency);
        Ok(GraphSample { adjacency, hard, soft: soft_t })
    }

    /// Observations `[M, n, O]` to sampled graphs.
    pub fn generate(&self, tape: &Tape, store: &ParamStore, obs: Var, rng: &mut impl Rng) -> Result<GraphSample> {
        let x = self.embed_observations(tape, store, obs)?;
        let logits = self.pairwise_logits(tape, store, x)?;
        self.sample_adjacency(tape, logits, rng)
    }
}
