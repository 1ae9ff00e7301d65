//! Reusable blocks: affine layers, MLPs, GRU cells, a bidirectional GRU and
//! the state-conditioned hypernetwork.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::None => x,
        }
    }
}

fn check_width(tape: &Tape, x: Var, width: usize, what: &str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::Shape(format!("{what} expects [batch, {width}], got {shape:?}")));
    }
    Ok(())
}

/// `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// PyTorch-style init: U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim, "linear layer")?;
        let y = tape.matmul(x, tape.param(store, self.weight));
        Ok(match self.bias {
            Some(b) => tape.add(y, tape.param(store, b)),
            None => y,
        })
    }
}

/// Layer widths `[in, h1, ..., out]` with one activation per affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("MLP widths must be positive, got {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        Ok(Self { widths, activations })
    }

    /// Hidden layers use `hidden_act`; the output layer is linear.
    pub fn uniform(widths: Vec<usize>, hidden_act: Activation) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let activations = (0..layers)
            .map(|i| if i + 1 == layers { Activation::None } else { hidden_act })
            .collect();
        Self::new(widths, activations)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { spec, layers }
    }

    pub fn in_dim(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    /// `x: [batch, in] -> [batch, out]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim(), "MLP")?;
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            h = act.apply(tape, layer.forward(tape, store, h)?);
        }
        Ok(h)
    }
}

/// GRU cell. The three gates are stored as column blocks `[r | z | n]` of
/// `w_ih: [I, 3H]` and `w_hh: [H, 3H]`:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    /// All weights and biases from U(-1/sqrt(H), 1/sqrt(H)).
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[input, 3 * hidden], bound, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[hidden, 3 * hidden], bound, rng);
        let b_ih = store.add_uniform(format!("{name}.b_ih"), &[3 * hidden], bound, rng);
        let b_hh = store.add_uniform(format!("{name}.b_hh"), &[3 * hidden], bound, rng);
        Self { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    /// `x W_ih + b_ih` for a whole stack of inputs at once.
    pub fn project_input(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(tape, x, self.input, "GRU input")?;
        Ok(tape.add(tape.matmul(x, tape.param(store, self.w_ih)), tape.param(store, self.b_ih)))
    }

    pub fn step(&self, tape: &Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let gi = self.project_input(tape, store, x)?;
        self.step_projected(tape, store, gi, h)
    }

    /// One step given an already projected input `gi = x W_ih + b_ih`.
    pub fn step_projected(&self, tape: &Tape, store: &ParamStore, gi: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        check_width(tape, h, hs, "GRU hidden state")?;
        check_width(tape, gi, 3 * hs, "GRU projected input")?;
        if tape.shape(gi)[0] != tape.shape(h)[0] {
            return Err(Error::Shape("GRU input and hidden batch sizes differ".into()));
        }
        let gh = tape.add(tape.matmul(h, tape.param(store, self.w_hh)), tape.param(store, self.b_hh));
        let r = tape.sigmoid(tape.add(tape.slice(gi, 1, 0, hs), tape.slice(gh, 1, 0, hs)));
        let z = tape.sigmoid(tape.add(tape.slice(gi, 1, hs, hs), tape.slice(gh, 1, hs, hs)));
        let n = tape.tanh(tape.add(tape.slice(gi, 1, 2 * hs, hs), tape.mul(r, tape.slice(gh, 1, 2 * hs, hs))));
        let keep = tape.mul(z, h);
        let fresh = tape.mul(tape.affine(z, -1.0, 1.0), n);
        Ok(tape.add(fresh, keep))
    }
}

/// Bidirectional GRU over `seq` (each element `[batch, I]`); position `t` of
/// the output is `[h_fwd(t) | h_bwd(t)]`, `[batch, 2H]`.
pub fn bigru_encode(
    tape: &Tape,
    store: &ParamStore,
    fwd: &GruCell,
    bwd: &GruCell,
    seq: &[Var],
) -> Result<Vec<Var>> {
    let (fwd_states, bwd_states) = bigru_states(tape, store, fwd, bwd, seq)?;
    Ok(fwd_states.into_iter().zip(bwd_states).map(|(f, b)| tape.concat(&[f, b], 1)).collect())
}

/// Forward and backward hidden states per position, before concatenation.
pub fn bigru_states(
    tape: &Tape,
    store: &ParamStore,
    fwd: &GruCell,
    bwd: &GruCell,
    seq: &[Var],
) -> Result<(Vec<Var>, Vec<Var>)> {
    if seq.is_empty() {
        return Err(Error::Shape("bidirectional GRU needs a non-empty sequence".into()));
    }
    let batch = tape.shape(seq[0])[0];
    let fwd_proj: Vec<Var> =
        seq.iter().map(|&x| fwd.project_input(tape, store, x)).collect::<Result<_>>()?;
    let bwd_proj: Vec<Var> =
        seq.iter().map(|&x| bwd.project_input(tape, store, x)).collect::<Result<_>>()?;
    bigru_states_projected(tape, store, fwd, bwd, &fwd_proj, &bwd_proj, batch)
}

/// Runs both directions over pre-projected inputs.
pub(crate) fn bigru_states_projected(
    tape: &Tape,
    store: &ParamStore,
    fwd: &GruCell,
    bwd: &GruCell,
    fwd_proj: &[Var],
    bwd_proj: &[Var],
    batch: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let len = fwd_proj.len();
    let mut h = tape.constant(crate::numerics::Tensor::zeros(&[batch, fwd.hidden]));
    let mut fwd_states = Vec::with_capacity(len);
    for gi in fwd_proj {
        h = fwd.step_projected(tape, store, *gi, h)?;
        fwd_states.push(h);
    }
    let mut h = tape.constant(crate::numerics::Tensor::zeros(&[batch, bwd.hidden]));
    let mut bwd_states = vec![h; len];
    for t in (0..len).rev() {
        h = bwd.step_projected(tape, store, bwd_proj[t], h)?;
        bwd_states[t] = h;
    }
    Ok((fwd_states, bwd_states))
}

/// State-conditioned generator of nonnegative mixing weights and a bias.
#[derive(Debug, Clone)]
pub struct Hypernet {
    pub weight: Mlp,
    pub bias: Mlp,
    pub n_agents: usize,
}

impl Hypernet {
    /// One relu hidden layer of width `hidden` in each head.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        hidden: usize,
        n_agents: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = Mlp::new(
            store,
            &format!("{name}.w"),
            MlpSpec::uniform(vec![state_dim, hidden, n_agents], Activation::Relu)?,
            rng,
        );
        let bias = Mlp::new(
            store,
            &format!("{name}.b"),
            MlpSpec::uniform(vec![state_dim, hidden, 1], Activation::Relu)?,
            rng,
        );
        Ok(Self { weight, bias, n_agents })
    }

    pub fn state_dim(&self) -> usize {
        self.weight.in_dim()
    }

    /// `state: [batch, S] -> (|w|: [batch, n], b: [batch, 1])`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, state: Var) -> Result<(Var, Var)> {
        let w = tape.abs(self.weight.forward(tape, store, state)?);
        let b = self.bias.forward(tape, store, state)?;
        Ok((w, b))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::Tensor;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_all(store: &mut ParamStore) {
        for e in store.entries_mut() {
            e.value.data_mut().fill(0.0);
        }
    }

    // Plain-loop reference implementations, independent of the tape.

    fn ref_affine(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (i, o) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * o];
        for r in 0..rows {
            for c in 0..o {
                let mut acc = b.data()[c];
                for k in 0..i {
                    acc += x[r * i + k] * w.data()[k * o + c];
                }
                out[r * o + c] = acc;
            }
        }
        out
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub(crate) fn ref_gru(cell: &GruCell, store: &ParamStore, x: &[f64], h: &[f64], rows: usize) -> Vec<f64> {
        let hs = cell.hidden;
        let gi = ref_affine(x, rows, store.value(cell.w_ih), store.value(cell.b_ih));
        let gh = ref_affine(h, rows, store.value(cell.w_hh), store.value(cell.b_hh));
        let mut out = vec![0.0; rows * hs];
        for r in 0..rows {
            for k in 0..hs {
                let g = |v: &[f64], blk: usize| v[r * 3 * hs + blk * hs + k];
                let rr = sig(g(&gi, 0) + g(&gh, 0));
                let zz = sig(g(&gi, 1) + g(&gh, 1));
                let nn = (g(&gi, 2) + rr * g(&gh, 2)).tanh();
                out[r * hs + k] = (1.0 - zz) * nn + zz * h[r * hs + k];
            }
        }
        out
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "l", 3, 3, true, &mut rng(0));
        *store.value_mut(layer.weight) = Tensor::eye(3);
        store.value_mut(layer.bias.unwrap()).data_mut().fill(0.0);
        let mlp = Mlp {
            spec: MlpSpec::new(vec![3, 3], vec![Activation::None]).unwrap(),
            layers: vec![layer],
        };
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -4.0]).unwrap());
        let y = mlp.forward(&tape, &store, x).unwrap();
        assert_eq!(tape.data(y), vec![1.0, -2.0, 3.0, 0.5, 0.0, -4.0]);
    }

    #[test]
    fn zero_weights_give_constant_bias_rows() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", MlpSpec::new(vec![4, 2], vec![Activation::None]).unwrap(), &mut rng(1));
        store.value_mut(mlp.layers[0].weight).data_mut().fill(0.0);
        *store.value_mut(mlp.layers[0].bias.unwrap()) = Tensor::vector(vec![0.25, -1.0]);
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng(2), &[3, 4]));
        let y = tape.data(mlp.forward(&tape, &store, x).unwrap());
        assert_eq!(y, vec![0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
    }

    #[test]
    fn mlp_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", MlpSpec::uniform(vec![4, 3, 2], Activation::Relu).unwrap(), &mut rng(1));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(mlp.forward(&tape, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_spec_validation() {
        assert!(MlpSpec::new(vec![3], vec![]).is_err());
        assert!(MlpSpec::new(vec![3, 0], vec![Activation::None]).is_err());
        assert!(MlpSpec::new(vec![3, 2], vec![]).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_matrix_oracle() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", MlpSpec::uniform(vec![5, 4, 3], Activation::Relu).unwrap(), &mut r);
        let x = rand_tensor(&mut r, &[6, 5]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.data(mlp.forward(&tape, &store, xv).unwrap());
        let l0 = &mlp.layers[0];
        let l1 = &mlp.layers[1];
        let h: Vec<f64> = ref_affine(x.data(), 6, store.value(l0.weight), store.value(l0.bias.unwrap()))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let expect = ref_affine(&h, 6, store.value(l1.weight), store.value(l1.bias.unwrap()));
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_with_zero_params_halves_hidden_state() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng(4));
        zero_all(&mut store);
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng(5), &[2, 3]));
        let h0 = rand_tensor(&mut rng(6), &[2, 4]);
        let h = tape.constant(h0.clone());
        let out = tape.data(cell.step(&tape, &store, x, h).unwrap());
        for (o, h) in out.iter().zip(h0.data()) {
            assert!((o - 0.5 * h).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_zero_hidden_and_zero_candidate_weights_stays_zero() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut r);
        // zero the candidate blocks of both weight matrices and biases
        for id in [cell.w_ih, cell.w_hh] {
            let t = store.value_mut(id);
            let cols = t.shape()[1];
            for row in 0..t.shape()[0] {
                for c in 8..12 {
                    t.data_mut()[row * cols + c] = 0.0;
                }
            }
        }
        for id in [cell.b_ih, cell.b_hh] {
            store.value_mut(id).data_mut()[8..12].fill(0.0);
        }
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut r, &[2, 3]));
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.data(cell.step(&tape, &store, x, h).unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_scalar_loop_reference() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 5, 3, &mut r);
        let x = rand_tensor(&mut r, &[4, 5]);
        let h = rand_tensor(&mut r, &[4, 3]);
        let tape = Tape::new();
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(h.clone()));
        let out = tape.data(cell.step(&tape, &store, xv, hv).unwrap());
        let expect = ref_gru(&cell, &store, x.data(), h.data(), 4);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng(0));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(cell.step(&tape, &store, x, h).is_err());
        let h = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(cell.step(&tape, &store, x, h).is_err());
    }

    fn bigru_fixture(seed: u64) -> (ParamStore, GruCell, GruCell) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let f = GruCell::new(&mut store, "f", 3, 2, &mut r);
        let b = GruCell::new(&mut store, "b", 3, 2, &mut r);
        (store, f, b)
    }

    #[test]
    fn bigru_single_element_is_two_independent_steps() {
        let (store, f, b) = bigru_fixture(9);
        let x = rand_tensor(&mut rng(10), &[2, 3]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = tape.data(bigru_encode(&tape, &store, &f, &b, &[xv]).unwrap()[0]);
        let zeros = vec![0.0; 4];
        let hf = ref_gru(&f, &store, x.data(), &zeros, 2);
        let hb = ref_gru(&b, &store, x.data(), &zeros, 2);
        let expect: Vec<f64> = (0..2).flat_map(|r| [hf[r * 2], hf[r * 2 + 1], hb[r * 2], hb[r * 2 + 1]]).collect();
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bigru_matches_two_unidirectional_passes() {
        let (store, f, b) = bigru_fixture(11);
        let mut r = rng(12);
        let seq: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 3])).collect();
        let tape = Tape::new();
        let vars: Vec<Var> = seq.iter().map(|t| tape.constant(t.clone())).collect();
        let out = bigru_encode(&tape, &store, &f, &b, &vars).unwrap();
        let mut hf = vec![vec![0.0; 4]];
        for x in &seq {
            let next = ref_gru(&f, &store, x.data(), hf.last().unwrap(), 2);
            hf.push(next);
        }
        let mut hb = vec![vec![0.0; 4]; 4];
        for t in (0..3).rev() {
            hb[t] = ref_gru(&b, &store, seq[t].data(), &hb[t + 1], 2);
        }
        for t in 0..3 {
            let got = tape.data(out[t]);
            for row in 0..2 {
                for k in 0..2 {
                    assert!((got[row * 4 + k] - hf[t + 1][row * 2 + k]).abs() < 1e-12);
                    assert!((got[row * 4 + 2 + k] - hb[t][row * 2 + k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bigru_reversal_symmetry() {
        let (store, f, b) = bigru_fixture(13);
        let mut r = rng(14);
        let seq: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, &[1, 3])).collect();
        let tape = Tape::new();
        let vars: Vec<Var> = seq.iter().map(|t| tape.constant(t.clone())).collect();
        let out = bigru_encode(&tape, &store, &f, &b, &vars).unwrap();
        let rev: Vec<Var> = vars.iter().rev().copied().collect();
        let out_rev = bigru_encode(&tape, &store, &b, &f, &rev).unwrap();
        for t in 0..4 {
            let a = tape.data(out[t]);
            let bb = tape.data(out_rev[3 - t]);
            assert_eq!(&a[0..2], &bb[2..4]);
            assert_eq!(&a[2..4], &bb[0..2]);
        }
    }

    #[test]
    fn bigru_every_position_depends_on_every_element() {
        let (store, f, b) = bigru_fixture(15);
        let mut r = rng(16);
        let seq: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, &[1, 3])).collect();
        let encode = |seq: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<Var> = seq.iter().map(|t| tape.constant(t.clone())).collect();
            let out = bigru_encode(&tape, &store, &f, &b, &vars).unwrap();
            out.iter().map(|v| tape.data(*v)).collect::<Vec<_>>()
        };
        let base = encode(&seq);
        for k in 0..4 {
            let mut perturbed = seq.clone();
            perturbed[k].data_mut()[0] += 0.5;
            let out = encode(&perturbed);
            for t in 0..4 {
                assert_ne!(out[t], base[t], "position {t} ignores element {k}");
            }
        }
    }

    #[test]
    fn bigru_empty_sequence_is_error() {
        let (store, f, b) = bigru_fixture(0);
        let tape = Tape::new();
        assert!(bigru_encode(&tape, &store, &f, &b, &[]).is_err());
    }

    #[test]
    fn hypernet_weights_nonnegative_and_match_abs_oracle() {
        let mut r = rng(17);
        let mut store = ParamStore::new();
        let hyper = Hypernet::new(&mut store, "h", 4, 8, 3, &mut r).unwrap();
        let state = rand_tensor(&mut r, &[5, 4]);
        let tape = Tape::new();
        let sv = tape.constant(state.clone());
        let (w, b) = hyper.forward(&tape, &store, sv).unwrap();
        let raw = tape.data(hyper.weight.forward(&tape, &store, sv).unwrap());
        let w = tape.data(w);
        assert!(w.iter().all(|&v| v >= 0.0));
        for (a, raw) in w.iter().zip(&raw) {
            assert_eq!(*a, raw.abs());
        }
        assert_eq!(tape.shape(b), vec![5, 1]);
    }

    #[test]
    fn zero_hypernet_outputs_zero() {
        let mut store = ParamStore::new();
        let hyper = Hypernet::new(&mut store, "h", 4, 8, 3, &mut rng(18)).unwrap();
        zero_all(&mut store);
        let tape = Tape::new();
        let sv = tape.constant(rand_tensor(&mut rng(19), &[2, 4]));
        let (w, b) = hyper.forward(&tape, &store, sv).unwrap();
        assert!(tape.data(w).iter().chain(tape.data(b).iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn hypernet_width_mismatch_is_error() {
        let mut store = ParamStore::new();
        let hyper = Hypernet::new(&mut store, "h", 4, 8, 3, &mut rng(18)).unwrap();
        let tape = Tape::new();
        let sv = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(hyper.forward(&tape, &store, sv).is_err());
    }

    #[test]
    fn blocks_pass_finite_difference_checks() {
        for seed in 0..3 {
            let mut r = rng(200 + seed);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "m", MlpSpec::uniform(vec![3, 4, 2], Activation::Tanh).unwrap(), &mut r);
            let f = GruCell::new(&mut store, "f", 2, 3, &mut r);
            let b = GruCell::new(&mut store, "b", 2, 3, &mut r);
            let hyper = Hypernet::new(&mut store, "h", 6, 5, 2, &mut r).unwrap();
            let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 3])).collect();
            let report = check_params(&store, 1e-5, None, |tape, s| {
                let seq: Vec<Var> = xs
                    .iter()
                    .map(|x| mlp.forward(tape, s, tape.constant(x.clone())))
                    .collect::<Result<_>>()?;
                let enc = bigru_encode(tape, s, &f, &b, &seq)?;
                let (w, bias) = hyper.forward(tape, s, enc[1])?;
                let y = tape.add(tape.sum(tape.mul(w, tape.slice(enc[2], 1, 0, 2)), 1), tape.reshape(bias, &[2]));
                Ok(tape.sum_all(tape.mul(y, y)))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
        }
    }
}
