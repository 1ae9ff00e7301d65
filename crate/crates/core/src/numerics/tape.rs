//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to produce input gradients. Nodes are only ever appended, so the node
//! order is a topological order and `backward` is a single reverse sweep.
//! When no input of an operation requires a gradient the node is stored as a
//! constant and nothing is saved for it.

use std::cell::{Ref, RefCell};

use super::params::{ParamId, ParamStore};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Additive offset applied to masked logits before a softmax.
pub const MASK_FILL: f64 = -1e30;

/// Exponent cap used when forming gradients with respect to absent edges.
const EDGE_RATIO_EXP_CAP: f64 = 700.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Sum { a: Var, axis: usize },
    SumAll { a: Var },
    Max { a: Var, axis: usize, argmax: Vec<usize> },
    Exp { a: Var },
    Log { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Abs { a: Var },
    Elu { a: Var },
    MaskedFill { a: Var, fill: Vec<bool> },
    Softmax { a: Var, axis: usize },
    GraphSoftmax { scores: Var, adj: Var, edge_ratio: Vec<f64> },
    GatherRows { a: Var, index: Vec<usize> },
    Pick { a: Var, index: Vec<usize> },
    StraightThrough { soft: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<Vec<Option<Var>>>,
    param_order: RefCell<Vec<(ParamId, Var)>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records gradients for parameters and leaves.
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// A tape where every node is a constant; used for target networks and acting.
    pub fn no_grad() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(record: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            param_order: RefCell::new(Vec::new()),
            record,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        if !self.record {
            return false;
        }
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape once; later calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.params.borrow().get(id.0) {
            return *v;
        }
        let var = self.leaf(store.value(id).clone());
        let mut params = self.params.borrow_mut();
        if params.len() <= id.0 {
            params.resize(id.0 + 1, None);
        }
        params[id.0] = Some(var);
        self.param_order.borrow_mut().push((id, var));
        var
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// The value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.data().to_vec()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.ndim() == 2 && bv.ndim() == 2, "matmul needs 2-d operands");
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let (k2, n) = if trans_b {
                (bv.shape()[1], bv.shape()[0])
            } else {
                (bv.shape()[0], bv.shape()[1])
            };
            assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
            Tensor::from_parts(vec![m, n], out)
        };
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Batched `a[B,m,k] @ b[B,k,n]`, or `b[B,n,k]^T` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.ndim() == 3 && bv.ndim() == 3, "bmm needs 3-d operands");
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let (k2, n) = if trans_b {
                (bv.shape()[2], bv.shape()[1])
            } else {
                (bv.shape()[1], bv.shape()[2])
            };
            assert_eq!(bs, bv.shape()[0], "bmm batch dims");
            assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", av.shape(), bv.shape());
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor::from_parts(vec![bs, m, n], out)
        };
        let rg = self.needs(&[a, b]);
        self.push(value, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    // ---- elementwise binary (second operand broadcasts over leading axes) --

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        check_suffix_broadcast(av.shape(), bv.shape());
        let bd = bv.data();
        let bl = bd.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    /// `a * scale`.
    pub fn scale(&self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `a * scale + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        let rg = self.needs(&[a]);
        self.push(value, Op::Affine { a, scale }, rg)
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            assert!(axis < first.len(), "concat axis out of range");
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", s, first);
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = vec![0.0; shape.iter().product()];
            let mut offset = 0;
            for v in inputs {
                let t = &nodes[v.0].value;
                let len = t.shape()[axis];
                let block = len * inner;
                for o in 0..outer {
                    let dst = o * total * inner + offset * inner;
                    out[dst..dst + block].copy_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
                offset += len;
            }
            Tensor::from_parts(shape, out)
        };
        let rg = self.needs(inputs);
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = {
            let t = self.value(a);
            let shape = t.shape();
            assert!(start + len <= shape[axis], "slice out of range");
            let (outer, full, inner) = split_axis(shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = o * full * inner + start * inner;
                out.extend_from_slice(&t.data()[src..src + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Tensor::from_parts(s, out)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Slice { a, axis, start }, rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .to_tensor(a)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.needs(&[a]);
        self.push(value, Op::Reshape { a }, rg)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let value = {
            let t = self.value(a);
            let map = permute_map(t.shape(), axes);
            let shape: Vec<usize> = axes.iter().map(|&ax| t.shape()[ax]).collect();
            let data = map.iter().map(|&i| t.data()[i]).collect();
            Tensor::from_parts(shape, data)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Permute { a, axes: axes.to_vec() }, rg)
    }

    /// 2-d transpose.
    pub fn transpose(&self, a: Var) -> Var {
        assert_eq!(self.value(a).ndim(), 2, "transpose needs a matrix");
        self.permute(a, &[1, 0])
    }

    /// Rows of `a` (axis 0) selected by `index`, repeats allowed.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        let value = {
            let t = self.value(a);
            let rows = t.shape()[0];
            let width: usize = t.shape()[1..].iter().product();
            let mut out = Vec::with_capacity(index.len() * width);
            for &r in index {
                assert!(r < rows, "gather row {r} out of {rows}");
                out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = index.len();
            Tensor::from_parts(shape, out)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::GatherRows { a, index: index.to_vec() }, rg)
    }

    /// For `a[..., C]`, picks element `index[r]` of every last-axis row `r`.
    pub fn pick(&self, a: Var, index: &[usize]) -> Var {
        let value = {
            let t = self.value(a);
            let c = *t.shape().last().expect("pick on scalar");
            let rows = t.numel() / c;
            assert_eq!(rows, index.len(), "pick index length");
            let data = index
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    assert!(i < c, "pick index {i} out of {c}");
                    t.data()[r * c + i]
                })
                .collect();
            Tensor::from_parts(t.shape()[..t.ndim() - 1].to_vec(), data)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Pick { a, index: index.to_vec() }, rg)
    }

    // ---- reductions ------------------------------------------------------

    /// Sum over `axis`, removing it.
    pub fn sum(&self, a: Var, axis: usize) -> Var {
        let value = {
            let t = self.value(a);
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum { a, axis }, rg)
    }

    pub fn mean(&self, a: Var, axis: usize) -> Var {
        let len = self.value(a).shape()[axis];
        let s = self.sum(a, axis);
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumAll { a }, rg)
    }

    /// Max over `axis` (removed) together with the argmax of each slice.
    /// Ties resolve to the lowest index.
    pub fn max(&self, a: Var, axis: usize) -> (Var, Vec<usize>) {
        let (value, argmax) = {
            let t = self.value(a);
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    for j in 0..len {
                        let x = t.data()[(o * len + j) * inner + i];
                        if j == 0 || x > out[slot] {
                            out[slot] = x;
                            arg[slot] = j;
                        }
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            (Tensor::from_parts(shape, out), arg)
        };
        let rg = self.needs(&[a]);
        let v = self.push(value, Op::Max { a, axis, argmax: argmax.clone() }, rg);
        (v, argmax)
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |a| Op::Exp { a })
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |a| Op::Log { a })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |a| Op::Tanh { a })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, |a| Op::Relu { a })
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, |a| Op::Abs { a })
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, |a| Op::Elu { a })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, op(a), rg)
    }

    /// Replaces entries where `fill` is true by `value`; no gradient flows there.
    pub fn masked_fill(&self, a: Var, fill: &[bool], value: f64) -> Var {
        let out = {
            let t = self.value(a);
            assert_eq!(fill.len(), t.numel(), "masked_fill mask length");
            let data = t
                .data()
                .iter()
                .zip(fill)
                .map(|(&x, &m)| if m { value } else { x })
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::MaskedFill { a, fill: fill.to_vec() }, rg)
    }

    /// Numerically stable softmax over `axis`. With a mask, `false` entries
    /// are excluded (their output is exactly zero); a slice with no `true`
    /// entry is an error.
    pub fn softmax(&self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if let Some(m) = mask {
                if m.len() != t.numel() {
                    return Err(Error::Shape(format!(
                        "softmax mask has {} entries for shape {:?}",
                        m.len(),
                        t.shape()
                    )));
                }
            }
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut out = vec![0.0; t.numel()];
            let mut z = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut any = false;
                    for (j, zj) in z.iter_mut().enumerate() {
                        let keep = mask.is_none_or(|m| m[idx(j)]);
                        any |= keep;
                        *zj = if keep { t.data()[idx(j)] } else { t.data()[idx(j)] + MASK_FILL };
                    }
                    if !any {
                        return Err(Error::EmptyNeighborhood { slice: o * inner + i });
                    }
                    let keep = |j: usize| mask.is_none_or(|m| m[idx(j)]);
                    let max = (0..len).filter(|&j| keep(j)).map(|j| z[j]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (j, zj) in z.iter().enumerate() {
                        let e = if keep(j) { (zj - max).exp() } else { 0.0 };
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// Softmax over the last axis of `scores`, restricted to the entries where
    /// `adj` is nonzero.
    ///
    /// The forward value is the masked softmax. The gradient is that of
    /// `w_ij = A_ij exp(s_ij) / sum_k A_ik exp(s_ik)` at the given (binary)
    /// adjacency, so absent edges still receive a gradient with respect to `adj`.
    pub fn graph_softmax(&self, scores: Var, adj: Var) -> Result<Var> {
        let (value, edge_ratio) = {
            let nodes = self.nodes.borrow();
            let (s, a) = (&nodes[scores.0].value, &nodes[adj.0].value);
            if s.shape() != a.shape() {
                return Err(Error::Shape(format!(
                    "scores {:?} vs adjacency {:?}",
                    s.shape(),
                    a.shape()
                )));
            }
            let len = *s.shape().last().expect("graph_softmax on scalar");
            let rows = s.numel() / len;
            let mut out = vec![0.0; s.numel()];
            let mut ratio = vec![0.0; s.numel()];
            let mut z = vec![0.0; len];
            for r in 0..rows {
                let base = r * len;
                let mut any = false;
                for (j, zj) in z.iter_mut().enumerate() {
                    let keep = a.data()[base + j] != 0.0;
                    any |= keep;
                    *zj = if keep { s.data()[base + j] } else { s.data()[base + j] + MASK_FILL };
                }
                if !any {
                    return Err(Error::EmptyNeighborhood { slice: r });
                }
                let max = (0..len)
                    .filter(|&j| a.data()[base + j] != 0.0)
                    .map(|j| z[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, zj) in z.iter().enumerate() {
                    let e = if a.data()[base + j] != 0.0 { (zj - max).exp() } else { 0.0 };
                    out[base + j] = e;
                    total += e;
                }
                let log_total = total.ln();
                for j in 0..len {
                    out[base + j] /= total;
                    let expo = (s.data()[base + j] - max - log_total).min(EDGE_RATIO_EXP_CAP);
                    ratio[base + j] = expo.exp();
                }
            }
            (Tensor::from_parts(s.shape().to_vec(), out), ratio)
        };
        let rg = self.needs(&[scores, adj]);
        Ok(self.push(value, Op::GraphSoftmax { scores, adj, edge_ratio }, rg))
    }

    /// Emits `hard` in the forward pass; gradients pass to `soft` unchanged.
    pub fn straight_through(&self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(self.value(soft).shape(), hard.shape(), "straight_through shapes");
        let rg = self.needs(&[soft]);
        self.push(hard, Op::StraightThrough { soft }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients land on every node that
    /// requires them; read them with [`Tape::grad`] or
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v), g.clone()))
    }

    /// Adds the gradients of every parameter loaded on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let grads = self.grads.borrow();
        for &(id, var) in self.param_order.borrow().iter() {
            if let Some(Some(g)) = grads.get(var.0) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_suffix_broadcast(a: &[usize], b: &[usize]) {
    let ok = b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a.ends_with(b));
    assert!(ok, "cannot broadcast {b:?} onto {a:?}");
}

/// For every output position of a permutation, the input flat index it reads.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    assert_eq!(shape.len(), axes.len(), "permute rank");
    let mut seen = vec![false; axes.len()];
    for &ax in axes {
        assert!(ax < axes.len() && !seen[ax], "invalid permutation {axes:?}");
        seen[ax] = true;
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// `c = A' B' + beta * c` where `A'` is `m x k` and `B'` is `k x n`. When
/// `a_t` is set `a` holds `A'^T` row-major, likewise `b_t` for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    g(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = node.value.shape()[1];
            accumulate(grads, nodes, *a, |ga| {
                if *trans_b {
                    gemm(m, n, k, g, false, bv.data(), false, ga, 1.0);
                } else {
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                if *trans_b {
                    gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                } else {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    gemm(m, n, k, gi, false, bi, !*trans_b, out, 1.0);
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, out, 1.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, out, 1.0);
                    }
                }
            });
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| {
                let bl = gb.len();
                for (i, gi) in g.iter().enumerate() {
                    gb[i % bl] += sign * gi;
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let bl = bv.numel();
            accumulate(grads, nodes, *a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * bv.data()[i % bl];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % bl] += gi * av.data()[i];
                }
            });
        }
        Op::Affine { a, scale } => {
            accumulate(grads, nodes, *a, |ga| {
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += gi * scale;
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for v in inputs {
                let len = val(*v).shape()[*axis];
                let block = len * inner;
                accumulate(grads, nodes, *v, |gv| {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        add_into(&mut gv[o * block..(o + 1) * block], &g[src..src + block]);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, full, inner) = split_axis(val(*a).shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    add_into(&mut ga[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Reshape { a } => accumulate(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::Permute { a, axes } => {
            let map = permute_map(val(*a).shape(), axes);
            accumulate(grads, nodes, *a, |ga| {
                for (gi, &src) in g.iter().zip(&map) {
                    ga[src] += gi;
                }
            });
        }
        Op::Sum { a, axis } => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                        add_into(dst, &g[o * inner..(o + 1) * inner]);
                    }
                }
            });
        }
        Op::SumAll { a } => accumulate(grads, nodes, *a, |ga| {
            for d in ga.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Max { a, axis, argmax } => {
            let (_, len, inner) = split_axis(val(*a).shape(), *axis);
            accumulate(grads, nodes, *a, |ga| {
                for (slot, (&j, gi)) in argmax.iter().zip(g).enumerate() {
                    let (o, i) = (slot / inner, slot % inner);
                    ga[(o * len + j) * inner + i] += gi;
                }
            });
        }
        Op::Exp { a } => pointwise(grads, nodes, *a, g, |_, y| y, &node.value),
        Op::Log { a } => pointwise(grads, nodes, *a, g, |x, _| 1.0 / x, &node.value),
        Op::Tanh { a } => pointwise(grads, nodes, *a, g, |_, y| 1.0 - y * y, &node.value),
        Op::Sigmoid { a } => pointwise(grads, nodes, *a, g, |_, y| y * (1.0 - y), &node.value),
        Op::Relu { a } => {
            pointwise(grads, nodes, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, &node.value)
        }
        Op::Abs { a } => pointwise(
            grads,
            nodes,
            *a,
            g,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            &node.value,
        ),
        Op::Elu { a } => {
            pointwise(grads, nodes, *a, g, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 }, &node.value)
        }
        Op::MaskedFill { a, fill } => accumulate(grads, nodes, *a, |ga| {
            for ((d, gi), &m) in ga.iter_mut().zip(g).zip(fill) {
                if !m {
                    *d += gi;
                }
            }
        }),
        Op::Softmax { a, axis } => {
            let y = &node.value;
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] += y.data()[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::GraphSoftmax { scores, adj, edge_ratio } => {
            let w = &node.value;
            let len = *w.shape().last().unwrap();
            let rows = w.numel() / len;
            let mut dots = vec![0.0; rows];
            for (r, dot) in dots.iter_mut().enumerate() {
                let base = r * len;
                *dot = (0..len).map(|j| g[base + j] * w.data()[base + j]).sum();
            }
            accumulate(grads, nodes, *scores, |gs| {
                for (r, dot) in dots.iter().enumerate() {
                    for j in r * len..(r + 1) * len {
                        gs[j] += w.data()[j] * (g[j] - dot);
                    }
                }
            });
            accumulate(grads, nodes, *adj, |gadj| {
                for (r, dot) in dots.iter().enumerate() {
                    for j in r * len..(r + 1) * len {
                        gadj[j] += edge_ratio[j] * (g[j] - dot);
                    }
                }
            });
        }
        Op::GatherRows { a, index } => {
            let width: usize = val(*a).shape()[1..].iter().product();
            accumulate(grads, nodes, *a, |ga| {
                for (k, &r) in index.iter().enumerate() {
                    add_into(&mut ga[r * width..(r + 1) * width], &g[k * width..(k + 1) * width]);
                }
            });
        }
        Op::Pick { a, index } => {
            let c = *val(*a).shape().last().unwrap();
            accumulate(grads, nodes, *a, |ga| {
                for (r, (&i, gi)) in index.iter().zip(g).enumerate() {
                    ga[r * c + i] += gi;
                }
            });
        }
        Op::StraightThrough { soft } => accumulate(grads, nodes, *soft, |gs| add_into(gs, g)),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient of an elementwise map given `df(x, y)` in terms of input and output.
fn pointwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: Var,
    g: &[f64],
    df: impl Fn(f64, f64) -> f64,
    out: &Tensor,
) {
    let x = &nodes[a.0].value;
    accumulate(grads, nodes, a, |ga| {
        for (i, d) in ga.iter_mut().enumerate() {
            *d += g[i] * df(x.data()[i], out.data()[i]);
        }
    });
}
