//! Finite-difference checks for every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_inputs;
use super::{Tape, Tensor, Var};
use crate::error::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Random positive tensor bounded away from zero.
fn rand_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &Tape, y: Var) -> Var {
    let shape = tape.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(&shape, w).unwrap());
    tape.sum_all(tape.mul(y, w))
}

fn check(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Result<Var>) {
    let report = check_inputs(&inputs, H, |t, v| Ok(weighted_sum(t, f(t, v)?))).unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error < TOL, "max relative error {}", report.max_rel_error);
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn grad_matmul() {
    for seed in 0..5 {
        let mut r = rng(seed);
        check(vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 2])], |t, v| Ok(t.matmul(v[0], v[1])));
        check(vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[2, 4])], |t, v| Ok(t.matmul_t(v[0], v[1])));
    }
}

#[test]
fn grad_bmm() {
    for seed in 0..5 {
        let mut r = rng(seed);
        check(vec![rand_t(&mut r, &[2, 3, 4]), rand_t(&mut r, &[2, 4, 3])], |t, v| {
            Ok(t.bmm(v[0], v[1], false))
        });
        check(vec![rand_t(&mut r, &[2, 3, 4]), rand_t(&mut r, &[2, 5, 4])], |t, v| {
            Ok(t.bmm(v[0], v[1], true))
        });
    }
}

#[test]
fn grad_binary_with_broadcast() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = rand_t(&mut r, &[3, 4]);
        let b = rand_t(&mut r, &[3, 4]);
        let bias = rand_t(&mut r, &[4]);
        check(vec![a.clone(), b.clone()], |t, v| Ok(t.add(v[0], v[1])));
        check(vec![a.clone(), b.clone()], |t, v| Ok(t.sub(v[0], v[1])));
        check(vec![a.clone(), b], |t, v| Ok(t.mul(v[0], v[1])));
        check(vec![a.clone(), bias.clone()], |t, v| Ok(t.add(v[0], v[1])));
        check(vec![a.clone(), bias.clone()], |t, v| Ok(t.sub(v[0], v[1])));
        check(vec![a, bias], |t, v| Ok(t.mul(v[0], v[1])));
    }
}

#[test]
fn grad_affine_and_reductions() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = rand_t(&mut r, &[2, 3, 4]);
        check(vec![a.clone()], |t, v| Ok(t.affine(v[0], -1.7, 0.4)));
        for axis in 0..3 {
            check(vec![a.clone()], |t, v| Ok(t.sum(v[0], axis)));
            check(vec![a.clone()], |t, v| Ok(t.mean(v[0], axis)));
            check(vec![a.clone()], |t, v| Ok(t.max(v[0], axis).0));
        }
        check(vec![a], |t, v| Ok(t.sum_all(v[0])));
    }
}

#[test]
fn grad_structural() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = rand_t(&mut r, &[2, 3, 4]);
        let b = rand_t(&mut r, &[2, 2, 4]);
        check(vec![a.clone(), b], |t, v| Ok(t.concat(&[v[0], v[1], v[0]], 1)));
        check(vec![a.clone()], |t, v| Ok(t.slice(v[0], 2, 1, 2)));
        check(vec![a.clone()], |t, v| Ok(t.reshape(v[0], &[6, 4])));
        check(vec![a.clone()], |t, v| Ok(t.permute(v[0], &[1, 2, 0])));
        check(vec![rand_t(&mut r, &[3, 5])], |t, v| Ok(t.transpose(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.gather_rows(v[0], &[1, 0, 1])));
        check(vec![a], |t, v| Ok(t.pick(v[0], &[0, 3, 1, 2, 2, 0])));
    }
}

#[test]
fn grad_unary() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = rand_t(&mut r, &[3, 4]);
        check(vec![a.clone()], |t, v| Ok(t.exp(v[0])));
        check(vec![rand_pos(&mut r, &[3, 4])], |t, v| Ok(t.log(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.tanh(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.relu(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.abs(v[0])));
        check(vec![a.clone()], |t, v| Ok(t.elu(v[0])));
        let fill: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        check(vec![a], move |t, v| Ok(t.masked_fill(v[0], &fill, 2.5)));
    }
}

#[test]
fn grad_softmax() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = rand_t(&mut r, &[2, 3, 4]);
        for axis in 0..3 {
            check(vec![a.clone()], |t, v| t.softmax(v[0], axis, None));
        }
        let mask: Vec<bool> = (0..24).map(|i| i % 4 != 1).collect();
        check(vec![a], move |t, v| t.softmax(v[0], 2, Some(&mask)));
    }
}

#[test]
fn grad_graph_softmax_scores_and_adjacency() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let scores = rand_t(&mut r, &[2, 3, 3]);
        let adj: Vec<f64> = (0..18).map(|i| if i % 4 == 0 || i % 3 == 1 { 1.0 } else { 0.0 }).collect();
        // scores only: adjacency treated as constant
        let adj_t = Tensor::new(&[2, 3, 3], adj.clone()).unwrap();
        check(vec![scores.clone()], {
            let adj_t = adj_t.clone();
            move |t, v| {
                let a = t.constant(adj_t.clone());
                t.graph_softmax(v[0], a)
            }
        });
        // adjacency gradient agrees with the A-weighted softmax written out by hand
        let tape = Tape::new();
        let s = tape.constant(scores.clone());
        let a = tape.leaf(adj_t.clone());
        let w = tape.graph_softmax(s, a).unwrap();
        let loss = weighted_sum(&tape, w);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap();
        let reference = |adj: &Tensor| -> f64 {
            let tape = Tape::no_grad();
            let s = tape.constant(scores.clone());
            let e = tape.exp(s);
            let num = tape.mul(e, tape.constant(adj.clone()));
            let den = tape.sum(num, 2);
            let mut w = tape.to_tensor(num);
            let den = tape.to_tensor(den);
            for i in 0..w.numel() {
                w.data_mut()[i] /= den.data()[i / 3];
            }
            let wv = tape.constant(w);
            tape.item(weighted_sum(&tape, wv))
        };
        for i in 0..18 {
            let mut up = adj_t.clone();
            up.data_mut()[i] += H;
            let mut down = adj_t.clone();
            down.data_mut()[i] -= H;
            let numeric = (reference(&up) - reference(&down)) / (2.0 * H);
            let err = super::gradcheck::relative_error(analytic.data()[i], numeric);
            assert!(err < TOL, "adjacency grad {i}: {} vs {numeric}", analytic.data()[i]);
        }
    }
}

#[test]
fn grad_three_layer_mlp_parameters() {
    use super::ParamStore;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let dims = [5, 7, 6, 3];
        let layers: Vec<_> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add_uniform(format!("w{i}"), &[w[0], w[1]], 0.8, &mut r),
                    store.add_uniform(format!("b{i}"), &[w[1]], 0.8, &mut r),
                )
            })
            .collect();
        let x = rand_t(&mut r, &[4, 5]);
        let report = super::gradcheck::check_params(&store, H, None, |tape, s| {
            let mut h = tape.constant(x.clone());
            for (i, &(w, b)) in layers.iter().enumerate() {
                h = tape.add(tape.matmul(h, tape.param(s, w)), tape.param(s, b));
                if i + 1 < layers.len() {
                    h = tape.tanh(h);
                }
            }
            Ok(weighted_sum(tape, h))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut r = rng(9);
        let a = rand_t(&mut r, &[4, 6]);
        let b = rand_t(&mut r, &[6, 3]);
        let tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let y = tape.softmax(tape.tanh(tape.matmul(va, vb)), 1, None).unwrap();
        let loss = weighted_sum(&tape, y);
        tape.backward(loss).unwrap();
        let bits = |t: Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (tape.item(loss).to_bits(), bits(tape.grad(va).unwrap()), bits(tape.grad(vb).unwrap()))
    };
    assert_eq!(run(), run());
}
