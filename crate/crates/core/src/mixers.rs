//! Mixing networks: individual Q-values to a joint `Q_tot`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgen::AdjacencyMatrix;
use crate::networks::{Activation, Hypernet, Linear, Mlp, MlpSpec};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixerKind {
    Vdn,
    Qmix,
    Dagmix,
    Dagvdn,
    Fcgmix,
}

impl MixerKind {
    pub const ALL: [MixerKind; 5] =
        [MixerKind::Vdn, MixerKind::Qmix, MixerKind::Dagmix, MixerKind::Dagvdn, MixerKind::Fcgmix];

    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::Vdn => "vdn",
            MixerKind::Qmix => "qmix",
            MixerKind::Dagmix => "dagmix",
            MixerKind::Dagvdn => "dagvdn",
            MixerKind::Fcgmix => "fcgmix",
        }
    }

    /// Masked attention stage before the combination.
    pub fn uses_attention(self) -> bool {
        matches!(self, MixerKind::Dagmix | MixerKind::Dagvdn | MixerKind::Fcgmix)
    }

    /// Needs a sampled graph per timestep.
    pub fn uses_graph(self) -> bool {
        matches!(self, MixerKind::Dagmix | MixerKind::Dagvdn)
    }

    /// State-conditioned combination instead of a plain sum.
    pub fn uses_hypernet(self) -> bool {
        matches!(self, MixerKind::Qmix | MixerKind::Dagmix | MixerKind::Fcgmix)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL.into_iter().find(|k| k.as_str() == lower).ok_or_else(|| {
            Error::Config(format!(
                "unknown algorithm `{s}` (valid kinds: vdn, qmix, dagmix, dagvdn, fcgmix)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub hypernet_hidden: usize,
    /// 1: single affine combination; 2: hidden ELU layer of width `mixing_embed`.
    pub mixing_layers: usize,
    pub mixing_embed: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { embed_dim: 32, attn_dim: 32, hypernet_hidden: 64, mixing_layers: 1, mixing_embed: 32 }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.attn_dim == 0 || self.hypernet_hidden == 0 || self.mixing_embed == 0 {
            return Err(Error::Config("mixer widths must be positive".into()));
        }
        if !(1..=2).contains(&self.mixing_layers) {
            return Err(Error::Config(format!("mixing_layers must be 1 or 2, got {}", self.mixing_layers)));
        }
        Ok(())
    }
}

/// Observation encoder plus query/key projections of the attention stage.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub embed: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        embed_dim: usize,
        d_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = Mlp::new(
            store,
            &format!("{name}.embed"),
            MlpSpec::new(vec![obs_dim, embed_dim], vec![Activation::Relu])?,
            rng,
        );
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let w_q = store.add_uniform(format!("{name}.w_q"), &[embed_dim, d_k], bound, rng);
        let w_k = store.add_uniform(format!("{name}.w_k"), &[embed_dim, d_k], bound, rng);
        Ok(Self { embed, w_q, w_k, d_k })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_dim()
    }

    /// `obs: [M, n, O] -> X: [M, n, E]`.
    pub fn embed(&self, tape: &Tape, store: &ParamStore, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs);
        if shape.len() != 3 {
            return Err(Error::Shape(format!("mixer observations must be [M, n, O], got {shape:?}")));
        }
        let flat = tape.reshape(obs, &[shape[0] * shape[1], shape[2]]);
        let x = self.embed.forward(tape, store, flat)?;
        Ok(tape.reshape(x, &[shape[0], shape[1], self.embed_dim()]))
    }

    /// Row-normalized attention weights `[M, n, n]` over each neighborhood.
    pub fn weights(&self, tape: &Tape, store: &ParamStore, x: Var, adjacency: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let e = self.embed_dim();
        if shape.len() != 3 || shape[2] != e {
            return Err(Error::Shape(format!("attention embeddings must be [M, n, {e}], got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        if tape.shape(adjacency) != [m, n, n] {
            return Err(Error::Shape(format!(
                "adjacency {:?} does not match {n} agents in {m} graphs",
                tape.shape(adjacency)
            )));
        }
        let flat = tape.reshape(x, &[m * n, e]);
        let q = tape.reshape(tape.matmul(flat, tape.param(store, self.w_q)), &[m, n, self.d_k]);
        let k = tape.reshape(tape.matmul(flat, tape.param(store, self.w_k)), &[m, n, self.d_k]);
        let scores = tape.scale(tape.bmm(q, k, true), 1.0 / (self.d_k as f64).sqrt());
        tape.graph_softmax(scores, adjacency)
    }
}

/// `Q'_a = sum_i w_{a,i} Q_i`; returns `(Q' [M, n], weights [M, n, n])`.
pub fn masked_attention_mix(
    tape: &Tape,
    store: &ParamStore,
    params: &AttentionParams,
    x: Var,
    adjacency: Var,
    q: Var,
) -> Result<(Var, Var)> {
    let w = params.weights(tape, store, x, adjacency)?;
    let shape = tape.shape(w);
    let (m, n) = (shape[0], shape[1]);
    if tape.shape(q) != [m, n] {
        return Err(Error::Shape(format!("Q-values {:?} vs {n} agents", tape.shape(q))));
    }
    let mixed = tape.bmm(w, tape.reshape(q, &[m, n, 1]), false);
    Ok((tape.reshape(mixed, &[m, n]), w))
}

/// `Q_tot = sum_a |w_a(s)| Q'_a + b(s)`, `[M]`.
pub fn qmix_combine(tape: &Tape, store: &ParamStore, hypernet: &Hypernet, q: Var, state: Var) -> Result<Var> {
    let shape = tape.shape(q);
    if shape.len() != 2 || shape[1] != hypernet.n_agents {
        return Err(Error::Shape(format!(
            "hypernetwork built for {} agents got Q-values {shape:?}",
            hypernet.n_agents
        )));
    }
    let (w, b) = hypernet.forward(tape, store, state)?;
    let weighted = tape.sum(tape.mul(w, q), 1);
    Ok(tape.add(weighted, tape.reshape(b, &[shape[0]])))
}

/// `Q_tot = sum_a Q_a`, `[M]`.
pub fn vdn_combine(tape: &Tape, q: Var) -> Var {
    tape.sum(q, 1)
}

/// Two-stage monotonic combination with a state-conditioned ELU hidden layer.
#[derive(Debug, Clone)]
pub struct TwoLayerMix {
    pub w1: Mlp,
    pub b1: Linear,
    pub w2: Mlp,
    pub b2: Mlp,
    pub n_agents: usize,
    pub embed: usize,
}

impl TwoLayerMix {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        hidden: usize,
        embed: usize,
        n_agents: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let relu_mlp = |store: &mut ParamStore, suffix: &str, out: usize, rng: &mut _| -> Result<Mlp> {
            Ok(Mlp::new(
                store,
                &format!("{name}.{suffix}"),
                MlpSpec::uniform(vec![state_dim, hidden, out], Activation::Relu)?,
                rng,
            ))
        };
        let w1 = relu_mlp(store, "w1", n_agents * embed, rng)?;
        let b1 = Linear::new(store, &format!("{name}.b1"), state_dim, embed, true, rng);
        let w2 = relu_mlp(store, "w2", embed, rng)?;
        let b2 = relu_mlp(store, "b2", 1, rng)?;
        Ok(Self { w1, b1, w2, b2, n_agents, embed })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, q: Var, state: Var) -> Result<Var> {
        let shape = tape.shape(q);
        if shape.len() != 2 || shape[1] != self.n_agents {
            return Err(Error::Shape(format!(
                "mixer built for {} agents got Q-values {shape:?}",
                self.n_agents
            )));
        }
        let m = shape[0];
        let w1 = tape.reshape(tape.abs(self.w1.forward(tape, store, state)?), &[m, self.n_agents, self.embed]);
        let pre = tape.reshape(tape.bmm(tape.reshape(q, &[m, 1, self.n_agents]), w1, false), &[m, self.embed]);
        let hidden = tape.elu(tape.add(pre, self.b1.forward(tape, store, state)?));
        let w2 = tape.abs(self.w2.forward(tape, store, state)?);
        let b2 = self.b2.forward(tape, store, state)?;
        Ok(tape.add(tape.sum(tape.mul(hidden, w2), 1), tape.reshape(b2, &[m])))
    }
}

#[derive(Debug, Clone)]
pub enum Combiner {
    Affine(Hypernet),
    TwoLayer(TwoLayerMix),
}

impl Combiner {
    pub fn forward(&self, tape: &Tape, store: &ParamStore, q: Var, state: Var) -> Result<Var> {
        match self {
            Combiner::Affine(h) => qmix_combine(tape, store, h, q, state),
            Combiner::TwoLayer(t) => t.forward(tape, store, q, state),
        }
    }
}

/// Inputs for `M` timesteps at once.
#[derive(Debug, Clone, Copy)]
pub struct MixInputs {
    /// `[M, n]` chosen-action Q-values.
    pub q: Var,
    /// `[M, n, O]`; required by the attention kinds.
    pub obs: Option<Var>,
    /// `[M, S]`.
    pub state: Var,
    /// `[M, n, n]`; required by DAGMIX and DAGVDN, ignored otherwise.
    pub adjacency: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MixOutput {
    /// `[M]`.
    pub q_tot: Var,
    /// `[M, n, n]` attention weights for the attention kinds.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Mixer {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub state_dim: usize,
    pub attention: Option<AttentionParams>,
    pub combiner: Option<Combiner>,
}

impl Mixer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: MixerKind,
        n_agents: usize,
        obs_dim: usize,
        state_dim: usize,
        config: MixerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_agents == 0 {
            return Err(Error::Config("mixer needs at least one agent".into()));
        }
        let attention = if kind.uses_attention() {
            Some(AttentionParams::new(store, &format!("{name}.attn"), obs_dim, config.embed_dim, config.attn_dim, rng)?)
        } else {
            None
        };
        let combiner = if !kind.uses_hypernet() {
            None
        } else if config.mixing_layers == 2 {
            Some(Combiner::TwoLayer(TwoLayerMix::new(
                store,
                &format!("{name}.hyper"),
                state_dim,
                config.hypernet_hidden,
                config.mixing_embed,
                n_agents,
                rng,
            )?))
        } else {
            Some(Combiner::Affine(Hypernet::new(
                store,
                &format!("{name}.hyper"),
                state_dim,
                config.hypernet_hidden,
                n_agents,
                rng,
            )?))
        };
        Ok(Self { kind, n_agents, state_dim, attention, combiner })
    }

    pub fn mix(&self, tape: &Tape, store: &ParamStore, inputs: &MixInputs) -> Result<MixOutput> {
        let q_shape = tape.shape(inputs.q);
        if q_shape.len() != 2 || q_shape[1] != self.n_agents {
            return Err(Error::Shape(format!("mixer for {} agents got Q-values {q_shape:?}", self.n_agents)));
        }
        let m = q_shape[0];
        let (q, attention) = match &self.attention {
            None => (inputs.q, None),
            Some(params) => {
                let obs = inputs
                    .obs
                    .ok_or_else(|| Error::Shape(format!("{} mixing needs observations", self.kind)))?;
                let adjacency = if self.kind.uses_graph() {
                    inputs
                        .adjacency
                        .ok_or_else(|| Error::Shape(format!("{} mixing needs an adjacency", self.kind)))?
                } else {
                    tape.constant(Tensor::full(&[m, self.n_agents, self.n_agents], 1.0))
                };
                let x = params.embed(tape, store, obs)?;
                let (mixed, w) = masked_attention_mix(tape, store, params, x, adjacency, inputs.q)?;
                (mixed, Some(w))
            }
        };
        let q_tot = match &self.combiner {
            None => vdn_combine(tape, q),
            Some(c) => c.forward(tape, store, q, inputs.state)?,
        };
        Ok(MixOutput { q_tot, attention })
    }

    /// `Q_tot(Q_a + delta) - Q_tot(Q)` for each agent, single timestep.
    pub fn monotonicity_probe(
        &self,
        store: &ParamStore,
        q: &[f64],
        obs: Option<&Tensor>,
        state: &Tensor,
        adjacency: Option<&AdjacencyMatrix>,
        delta: f64,
    ) -> Result<Vec<f64>> {
        if !(delta > 0.0) {
            return Err(Error::Config(format!("probe step must be positive, got {delta}")));
        }
        let n = q.len();
        let eval = |q: Vec<f64>| -> Result<f64> {
            let tape = Tape::no_grad();
            let inputs = MixInputs {
                q: tape.constant(Tensor::new(&[1, n], q)?),
                obs: obs.map(|o| tape.constant(o.clone().reshape(&[1, n, o.numel() / n.max(1)]).unwrap())),
                state: tape.constant(state.clone().reshape(&[1, state.numel()])?),
                adjacency: adjacency.map(|a| tape.constant(a.to_tensor().reshape(&[1, n, n]).unwrap())),
            };
            let out = self.mix(&tape, store, &inputs)?;
            Ok(tape.item(out.q_tot))
        };
        let base = eval(q.to_vec())?;
        (0..n)
            .map(|a| {
                let mut bumped = q.to_vec();
                bumped[a] += delta;
                Ok(eval(bumped)? - base)
            })
            .collect()
    }
}

/// Mean Shannon entropy (nats) of the attention rows in `weights: [.., n]`.
pub fn attention_entropy(weights: &Tensor) -> f64 {
    let Some(&n) = weights.shape().last() else { return 0.0 };
    if n == 0 || weights.numel() == 0 {
        return 0.0;
    }
    let rows: Vec<f64> = weights
        .data()
        .chunks(n)
        .map(|row| row.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum())
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graphgen::full_adjacency;
    use crate::numerics::gradcheck::check_params;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn small() -> MixerConfig {
        MixerConfig { embed_dim: 4, attn_dim: 3, hypernet_hidden: 5, mixing_layers: 1, mixing_embed: 3 }
    }

    fn random_graph(r: &mut ChaCha8Rng, n: usize) -> AdjacencyMatrix {
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|_| r.gen_bool(0.4)).collect();
        AdjacencyMatrix::from_edges(n, &edges)
    }

    struct Case {
        store: ParamStore,
        mixer: Mixer,
        q: Vec<f64>,
        obs: Tensor,
        state: Tensor,
        adj: AdjacencyMatrix,
    }

    fn case(kind: MixerKind, n: usize, seed: u64, config: MixerConfig) -> Case {
        let mut r = rng(seed);
        let (obs_dim, state_dim) = (3, 4);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, "mixer", kind, n, obs_dim, state_dim, config, &mut r).unwrap();
        let q = rand_vec(&mut r, n);
        let obs = Tensor::new(&[n, obs_dim], rand_vec(&mut r, n * obs_dim)).unwrap();
        let state = Tensor::vector(rand_vec(&mut r, state_dim));
        let adj = random_graph(&mut r, n);
        Case { store, mixer, q, obs, state, adj }
    }

    fn q_tot(c: &Case, q: &[f64], adj: Option<&AdjacencyMatrix>) -> f64 {
        let n = q.len();
        let tape = Tape::no_grad();
        let inputs = MixInputs {
            q: tape.constant(Tensor::new(&[1, n], q.to_vec()).unwrap()),
            obs: Some(tape.constant(c.obs.clone().reshape(&[1, n, 3]).unwrap())),
            state: tape.constant(c.state.clone().reshape(&[1, 4]).unwrap()),
            adjacency: adj.map(|a| tape.constant(a.to_tensor().reshape(&[1, n, n]).unwrap())),
        };
        tape.item(c.mixer.mix(&tape, &c.store, &inputs).unwrap().q_tot)
    }

    /// Scalar-loop masked attention: embeddings, projections, masked row
    /// softmax and weighted sum written out element by element.
    fn oracle_attention(store: &ParamStore, p: &AttentionParams, obs: &Tensor, adj: &AdjacencyMatrix, q: &[f64]) -> Vec<f64> {
        let n = q.len();
        let o = obs.shape()[1];
        let layer = &p.embed.layers[0];
        let (we, be) = (store.value(layer.weight), store.value(layer.bias.unwrap()));
        let e = p.embed_dim();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|a| {
                (0..e)
                    .map(|c| {
                        let mut s = be.data()[c];
                        for k in 0..o {
                            s += obs.get(&[a, k]) * we.get(&[k, c]);
                        }
                        s.max(0.0)
                    })
                    .collect()
            })
            .collect();
        let proj = |w: &Tensor, a: usize| -> Vec<f64> {
            (0..p.d_k).map(|c| (0..e).map(|k| x[a][k] * w.get(&[k, c])).sum()).collect()
        };
        let (wq, wk) = (store.value(p.w_q), store.value(p.w_k));
        (0..n)
            .map(|a| {
                let qa = proj(wq, a);
                let nbrs = adj.neighborhood(a);
                let scores: Vec<f64> = nbrs
                    .iter()
                    .map(|&i| {
                        let ki = proj(wk, i);
                        qa.iter().zip(&ki).map(|(u, v)| u * v).sum::<f64>() / (p.d_k as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                nbrs.iter().zip(&scores).map(|(&i, s)| (s - mx).exp() / z * q[i]).sum()
            })
            .collect()
    }

    fn oracle_hypernet(store: &ParamStore, h: &Hypernet, state: &[f64], qp: &[f64]) -> f64 {
        let mlp = |m: &Mlp| -> Vec<f64> {
            let mut v = state.to_vec();
            for (li, layer) in m.layers.iter().enumerate() {
                let w = store.value(layer.weight);
                let b = store.value(layer.bias.unwrap());
                v = (0..layer.out_dim)
                    .map(|c| {
                        let s = b.data()[c] + (0..layer.in_dim).map(|k| v[k] * w.get(&[k, c])).sum::<f64>();
                        if li + 1 < m.layers.len() { s.max(0.0) } else { s }
                    })
                    .collect();
            }
            v
        };
        let w = mlp(&h.weight);
        let b = mlp(&h.bias)[0];
        w.iter().zip(qp).map(|(w, q)| w.abs() * q).sum::<f64>() + b
    }

    #[test]
    fn kind_parsing_lists_valid_kinds() {
        for k in MixerKind::ALL {
            assert_eq!(k.as_str().parse::<MixerKind>().unwrap(), k);
        }
        assert_eq!("DAGMIX".parse::<MixerKind>().unwrap(), MixerKind::Dagmix);
        let err = "qtran".parse::<MixerKind>().unwrap_err().to_string();
        assert!(err.contains("vdn, qmix, dagmix, dagvdn, fcgmix"), "{err}");
    }

    #[test]
    fn identity_graph_leaves_q_unchanged() {
        let c = case(MixerKind::Dagmix, 4, 0, small());
        let p = c.mixer.attention.as_ref().unwrap();
        let tape = Tape::new();
        let x = p.embed(&tape, &c.store, tape.constant(c.obs.clone().reshape(&[1, 4, 3]).unwrap())).unwrap();
        let adj = tape.constant(Tensor::eye(4).reshape(&[1, 4, 4]).unwrap());
        let q = tape.constant(Tensor::new(&[1, 4], c.q.clone()).unwrap());
        let (mixed, _) = masked_attention_mix(&tape, &c.store, p, x, adj, q).unwrap();
        assert_eq!(tape.data(mixed), c.q);
    }

    #[test]
    fn zero_projections_give_uniform_weights() {
        let mut c = case(MixerKind::Dagmix, 3, 1, small());
        let p = c.mixer.attention.clone().unwrap();
        c.store.value_mut(p.w_q).data_mut().fill(0.0);
        c.store.value_mut(p.w_k).data_mut().fill(0.0);
        let adj = AdjacencyMatrix::from_edges(3, &[(0, 1)]);
        let tape = Tape::new();
        let x = p.embed(&tape, &c.store, tape.constant(c.obs.clone().reshape(&[1, 3, 3]).unwrap())).unwrap();
        let a = tape.constant(adj.to_tensor().reshape(&[1, 3, 3]).unwrap());
        let q = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let (mixed, _) = masked_attention_mix(&tape, &c.store, &p, x, a, q).unwrap();
        assert_eq!(tape.data(mixed), vec![1.5, 2.0, 3.0]);
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        for seed in 0..10 {
            let c = case(MixerKind::Dagmix, 3, 10 + seed, small());
            let p = c.mixer.attention.as_ref().unwrap();
            let tape = Tape::new();
            let x = p.embed(&tape, &c.store, tape.constant(c.obs.clone().reshape(&[1, 3, 3]).unwrap())).unwrap();
            let a = tape.constant(c.adj.to_tensor().reshape(&[1, 3, 3]).unwrap());
            let q = tape.constant(Tensor::new(&[1, 3], c.q.clone()).unwrap());
            let (mixed, w) = masked_attention_mix(&tape, &c.store, p, x, a, q).unwrap();
            let expect = oracle_attention(&c.store, p, &c.obs, &c.adj, &c.q);
            for (got, want) in tape.data(mixed).iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
            for row in tape.data(w).chunks(3) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qmix_combine_cases() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let h = Hypernet::new(&mut store, "h", 4, 5, 3, &mut r).unwrap();
        let state = rand_vec(&mut r, 4);
        let qp = rand_vec(&mut r, 3);
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let s = tape.constant(Tensor::new(&[1, 4], state.clone()).unwrap());
            let q = tape.constant(Tensor::new(&[1, 3], qp.clone()).unwrap());
            tape.item(qmix_combine(&tape, store, &h, q, s).unwrap())
        };
        assert!((run(&store) - oracle_hypernet(&store, &h, &state, &qp)).abs() < 1e-12);

        // force w = 1, b = 0: zero weights with unit output bias
        let mut forced = store.clone();
        for layer in h.weight.layers.iter().chain(&h.bias.layers) {
            forced.value_mut(layer.weight).data_mut().fill(0.0);
            forced.value_mut(layer.bias.unwrap()).data_mut().fill(0.0);
        }
        forced.value_mut(h.weight.layers[1].bias.unwrap()).data_mut().fill(1.0);
        assert!((run(&forced) - qp.iter().sum::<f64>()).abs() < 1e-15);

        let mut zero = store.clone();
        for e in zero.entries_mut() {
            e.value.data_mut().fill(0.0);
        }
        assert_eq!(run(&zero), 0.0);

        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[1, 4], state.clone()).unwrap());
        let q = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(qmix_combine(&tape, &store, &h, q, s).is_err());
    }

    #[test]
    fn vdn_combine_sums() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(tape.data(vdn_combine(&tape, q)), vec![6.0, 0.0]);
        let mut r = rng(4);
        let v = rand_vec(&mut r, 7);
        let q = tape.constant(Tensor::new(&[1, 7], v.clone()).unwrap());
        assert!((tape.item(vdn_combine(&tape, q)) - v.iter().fold(0.0, |a, b| a + b)).abs() < 1e-15);
    }

    #[test]
    fn vdn_mix_of_one_and_two_is_three() {
        let c = case(MixerKind::Vdn, 2, 5, small());
        assert_eq!(q_tot(&c, &[1.0, 2.0], None), 3.0);
        assert!(c.store.is_empty());
    }

    #[test]
    fn dagmix_end_to_end_matches_chained_oracles() {
        for seed in 0..5 {
            let c = case(MixerKind::Dagmix, 3, 20 + seed, small());
            let got = q_tot(&c, &c.q, Some(&c.adj));
            let p = c.mixer.attention.as_ref().unwrap();
            let qp = oracle_attention(&c.store, p, &c.obs, &c.adj, &c.q);
            let Some(Combiner::Affine(h)) = &c.mixer.combiner else { panic!() };
            let want = oracle_hypernet(&c.store, h, c.state.data(), &qp);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn fcgmix_equals_dagmix_with_full_graph() {
        for n in [2, 5, 27] {
            let fc = case(MixerKind::Fcgmix, n, 30, small());
            let dag = case(MixerKind::Dagmix, n, 30, small());
            assert!(fc.store.values_equal(&dag.store));
            let full = full_adjacency(n).unwrap();
            let a = q_tot(&fc, &fc.q, None);
            let b = q_tot(&dag, &dag.q, Some(&full));
            assert_eq!(a.to_bits(), b.to_bits(), "n = {n}");
        }
    }

    #[test]
    fn masked_agents_do_not_influence_mixed_values() {
        let mut r = rng(40);
        for n in [3, 8] {
            let c = case(MixerKind::Dagmix, n, 41, small());
            let p = c.mixer.attention.as_ref().unwrap();
            let mixed = |q: &[f64], obs: &Tensor| {
                let tape = Tape::new();
                let x = p.embed(&tape, &c.store, tape.constant(obs.clone().reshape(&[1, n, 3]).unwrap())).unwrap();
                let a = tape.constant(c.adj.to_tensor().reshape(&[1, n, n]).unwrap());
                let qv = tape.constant(Tensor::new(&[1, n], q.to_vec()).unwrap());
                tape.data(masked_attention_mix(&tape, &c.store, p, x, a, qv).unwrap().0)
            };
            let base = mixed(&c.q, &c.obs);
            for a in 0..n {
                let outside: Vec<usize> = (0..n).filter(|j| c.adj.get(a, *j) == 0.0).collect();
                let mut q = c.q.clone();
                let mut obs = c.obs.clone();
                for &j in &outside {
                    q[j] = r.gen_range(-100.0..100.0);
                    for k in 0..3 {
                        obs.set(&[j, k], r.gen_range(-100.0..100.0));
                    }
                }
                assert_eq!(mixed(&q, &obs)[a].to_bits(), base[a].to_bits());
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let n = 4;
        let c = case(MixerKind::Dagmix, n, 50, small());
        let perm = [2, 0, 3, 1];
        let p = c.mixer.attention.as_ref().unwrap();
        let mixed = |q: &[f64], obs: &Tensor, adj: &AdjacencyMatrix| {
            let tape = Tape::new();
            let x = p.embed(&tape, &c.store, tape.constant(obs.clone().reshape(&[1, n, 3]).unwrap())).unwrap();
            let a = tape.constant(adj.to_tensor().reshape(&[1, n, n]).unwrap());
            let qv = tape.constant(Tensor::new(&[1, n], q.to_vec()).unwrap());
            tape.data(masked_attention_mix(&tape, &c.store, p, x, a, qv).unwrap().0)
        };
        let base = mixed(&c.q, &c.obs, &c.adj);
        let q: Vec<f64> = perm.iter().map(|&i| c.q[i]).collect();
        let obs = Tensor::new(&[n, 3], perm.iter().flat_map(|&i| c.obs.data()[i * 3..i * 3 + 3].to_vec()).collect()).unwrap();
        let adj = AdjacencyMatrix::new(
            n,
            (0..n * n).map(|k| c.adj.get(perm[k / n], perm[k % n])).collect(),
            true,
        )
        .unwrap();
        let permuted = mixed(&q, &obs, &adj);
        for (k, &i) in perm.iter().enumerate() {
            assert!((permuted[k] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn vdn_probe_is_exactly_delta() {
        let c = case(MixerKind::Vdn, 3, 60, small());
        let d = c.mixer.monotonicity_probe(&c.store, &[0.5, 0.25, -1.0], None, &c.state, None, 0.125).unwrap();
        assert_eq!(d, vec![0.125; 3]);
        assert!(c.mixer.monotonicity_probe(&c.store, &c.q, None, &c.state, None, 0.0).is_err());
    }

    #[test]
    fn two_layer_mixer_is_monotone_and_differentiable() {
        let config = MixerConfig { mixing_layers: 2, ..small() };
        for seed in 0..5 {
            let c = case(MixerKind::Qmix, 3, 70 + seed, config);
            let d = c.mixer.monotonicity_probe(&c.store, &c.q, None, &c.state, None, 1e-3).unwrap();
            assert!(d.iter().all(|&v| v >= -1e-12), "{d:?}");
            let report = check_params(&c.store, 1e-5, None, |tape, s| {
                let inputs = MixInputs {
                    q: tape.constant(Tensor::new(&[1, 3], c.q.clone()).unwrap()),
                    obs: None,
                    state: tape.constant(c.state.clone().reshape(&[1, 4]).unwrap()),
                    adjacency: None,
                };
                Ok(tape.sum_all(c.mixer.mix(tape, s, &inputs)?.q_tot))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4);
        }
    }

    #[test]
    fn entropy_of_uniform_rows() {
        let w = Tensor::new(&[2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert!((attention_entropy(&w) - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    fn kind_strategy() -> impl Strategy<Value = MixerKind> {
        prop_oneof![
            Just(MixerKind::Vdn),
            Just(MixerKind::Qmix),
            Just(MixerKind::Dagmix),
            Just(MixerKind::Dagvdn),
            Just(MixerKind::Fcgmix)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn q_tot_is_monotone_in_every_agent(kind in kind_strategy(), n in 1usize..6, seed in any::<u64>()) {
            let c = case(kind, n, seed, small());
            let adj = kind.uses_graph().then_some(&c.adj);
            let d = c.mixer.monotonicity_probe(&c.store, &c.q, Some(&c.obs), &c.state, adj, 1e-3).unwrap();
            prop_assert!(d.iter().all(|&v| v >= -1e-8), "{:?}", d);

            let tape = Tape::new();
            let q = tape.leaf(Tensor::new(&[1, n], c.q.clone()).unwrap());
            let inputs = MixInputs {
                q,
                obs: Some(tape.constant(c.obs.clone().reshape(&[1, n, 3]).unwrap())),
                state: tape.constant(c.state.clone().reshape(&[1, 4]).unwrap()),
                adjacency: adj.map(|a| tape.constant(a.to_tensor().reshape(&[1, n, n]).unwrap())),
            };
            let out = c.mixer.mix(&tape, &c.store, &inputs).unwrap();
            tape.backward(tape.sum_all(out.q_tot)).unwrap();
            let g = tape.grad(q).unwrap();
            prop_assert!(g.data().iter().all(|&v| v >= -1e-12), "{:?}", g);
        }

        #[test]
        fn attention_rows_are_distributions(n in 1usize..7, seed in any::<u64>()) {
            let c = case(MixerKind::Dagmix, n, seed, small());
            let p = c.mixer.attention.as_ref().unwrap();
            let tape = Tape::new();
            let x = p.embed(&tape, &c.store, tape.constant(c.obs.clone().reshape(&[1, n, 3]).unwrap())).unwrap();
            let a = tape.constant(c.adj.to_tensor().reshape(&[1, n, n]).unwrap());
            let w = tape.to_tensor(p.weights(&tape, &c.store, x, a).unwrap());
            for (i, row) in w.data().chunks(n).enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &v) in row.iter().enumerate() {
                    prop_assert!(v >= 0.0);
                    if c.adj.get(i, j) == 0.0 { prop_assert_eq!(v, 0.0); }
                }
            }
        }
    }

    #[test]
    fn mixer_parameters_pass_gradient_check() {
        for kind in [MixerKind::Qmix, MixerKind::Dagmix, MixerKind::Dagvdn, MixerKind::Fcgmix] {
            let c = case(kind, 3, 80, small());
            let report = check_params(&c.store, 1e-5, None, |tape, s| {
                let inputs = MixInputs {
                    q: tape.constant(Tensor::new(&[1, 3], c.q.clone()).unwrap()),
                    obs: Some(tape.constant(c.obs.clone().reshape(&[1, 3, 3]).unwrap())),
                    state: tape.constant(c.state.clone().reshape(&[1, 4]).unwrap()),
                    adjacency: Some(tape.constant(c.adj.to_tensor().reshape(&[1, 3, 3]).unwrap())),
                };
                Ok(tape.sum_all(c.mixer.mix(tape, s, &inputs)?.q_tot))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {}", report.max_rel_error);
        }
    }
}
