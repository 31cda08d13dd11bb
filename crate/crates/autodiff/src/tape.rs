//! The gradient tape and differentiable operations.
//!
//! Values are computed eagerly as operations are recorded. Each `Var` is an
//! index into its tape; the tape is append-only so node order is already a
//! topological order and `backward` simply walks it in reverse.
//!
//! Operations panic on shape mismatches: they are programming errors inside
//! model code. Fallible entry points (`backward`, optimisers, checkpoints)
//! return `Result`.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::param::{Param, ParamId};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Floor applied to row norms in `l2_normalize`.
pub const L2_FLOOR: f64 = 1e-12;
/// Variance stabiliser in `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Distance to a kink or pole under which finite differences are unreliable.
const KINK_TOL: f64 = 1e-3;
const POLE_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    L2Normalize { x: usize, norms: Vec<f64> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    SquaredError(usize, usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
    SoftCrossEntropy { logits: usize, target: Tensor },
    Gather { x: usize, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape built with [`Tape::inference`] binds parameters as constants, so
/// nothing is differentiable and no gradient bookkeeping happens.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(ParamId, usize)>>,
    inference: bool,
    singular: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are bound as constants.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the first operation evaluated close to a kink or pole, if any.
    pub fn singular_region(&self) -> Option<&'static str> {
        self.singular.get()
    }

    fn note_singular(&self, what: &'static str) {
        if self.singular.get().is_none() {
            self.singular.set(Some(what));
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A differentiable leaf that is not tied to a parameter.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let rg = !self.inference;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a parameter's current value as a leaf.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if self.inference {
            return self.constant(p.value.clone());
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.bindings.borrow_mut().push((p.id(), v.id));
        v
    }

    /// Binds a parameter without making it differentiable.
    pub fn frozen(&self, p: &Param) -> Var<'_> {
        self.constant(p.value.clone())
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        let mut by_param: HashMap<ParamId, Tensor> = HashMap::new();
        for &(pid, vid) in self.bindings.borrow().iter() {
            if let Some(Some(g)) = grads.get(vid) {
                by_param
                    .entry(pid)
                    .and_modify(|acc| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients { grads, by_param })
    }
}

/// Gradients produced by one call to [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a differentiable leaf, `None` if the loss does not reach it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, summed over all of its bindings.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.by_param.get(&id).cloned()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let [r, c] = shape;
    let mut out = Tensor::zeros(r, c);
    let cols = g.cols();
    for i in 0..g.rows() {
        for j in 0..cols {
            let ri = if r == 1 { 0 } else { i };
            let cj = if c == 1 { 0 } else { j };
            let v = out.get(ri, cj) + g.get(i, j);
            out.set(ri, cj, v);
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> [usize; 2] {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => [r, c],
        _ => panic!(
            "{}",
            AutodiffError::ShapeMismatch {
                op,
                left: a,
                right: b
            }
        ),
    }
}

/// Elementwise combination with row/column broadcasting.
fn broadcast_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = broadcast_shape(op, a.shape(), b.shape());
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(bget(a, i, j), bget(b, i, j)));
        }
    }
    Tensor::new(r, c, data).expect("broadcast shape")
}

#[inline]
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let ri = if t.rows() == 1 { 0 } else { i };
    let cj = if t.cols() == 1 { 0 } else { j };
    t.get(ri, cj)
}

fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn row_logsumexp(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|r| {
            let row = x.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            }
            if rg(*b) {
                accumulate(grads, *b, reduce_to(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            }
            if rg(*b) {
                accumulate(grads, *b, reduce_to(&g.scale(-1.0), val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let ga = broadcast_zip(g, bv, "mul", |x, y| x * y);
                accumulate(grads, *a, reduce_to(&ga, av.shape()));
            }
            if rg(*b) {
                let gb = broadcast_zip(g, av, "mul", |x, y| x * y);
                accumulate(grads, *b, reduce_to(&gb, bv.shape()));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let ga = broadcast_zip(g, bv, "div", |x, y| x / y);
                accumulate(grads, *a, reduce_to(&ga, av.shape()));
            }
            if rg(*b) {
                // d(a/b)/db = -out / b
                let t = broadcast_zip(g, out, "div", |x, y| x * y);
                let gb = broadcast_zip(&t, bv, "div", |x, y| -x / y);
                accumulate(grads, *b, reduce_to(&gb, bv.shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, *a, g.scale(-1.0)),
        Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, matmul_nt(g, val(*b)));
            }
            if rg(*b) {
                accumulate(grads, *b, matmul_tn(val(*a), g));
            }
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y * (1.0 - y))),
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Sqrt(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * 0.5 / y)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Abs(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g * x.signum())),
        Op::Clamp { x, lo, hi } => accumulate(
            grads,
            *x,
            g.zip_map(val(*x), |g, v| if v >= *lo && v <= *hi { g } else { 0.0 }),
        ),
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let mut ga = g.clone();
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    if x > y {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = g.clone();
                for ((o, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    if x <= y {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Softmax(a) => {
            let mut gx = g.clone();
            let c = out.cols();
            for r in 0..out.rows() {
                let y = out.row_slice(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx.data_mut()[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *a, gx);
        }
        Op::LogSoftmax(a) => {
            let mut gx = g.clone();
            let c = out.cols();
            for r in 0..out.rows() {
                let gr = &g.data()[r * c..(r + 1) * c];
                let s: f64 = gr.iter().sum();
                for j in 0..c {
                    gx.data_mut()[r * c + j] = gr[j] - out.get(r, j).exp() * s;
                }
            }
            accumulate(grads, *a, gx);
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let mut p = x.clone();
            for r in 0..x.rows() {
                let lse = out.get(r, 0);
                for j in 0..x.cols() {
                    p.set(r, j, (x.get(r, j) - lse).exp() * g.get(r, 0));
                }
            }
            accumulate(grads, *a, p);
        }
        Op::L2Normalize { x, norms } => {
            let mut gx = g.clone();
            let c = out.cols();
            for (r, &n) in norms.iter().enumerate() {
                let gr = &g.data()[r * c..(r + 1) * c];
                if n > L2_FLOOR {
                    let y = out.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = (gr[j] - y[j] * dot) / n;
                    }
                } else {
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = gr[j] / L2_FLOOR;
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::LayerNorm { x, inv_std } => {
            let mut gx = g.clone();
            let c = out.cols();
            let n = c as f64;
            for (r, &is) in inv_std.iter().enumerate() {
                let y = out.row_slice(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let mg: f64 = gr.iter().sum::<f64>() / n;
                let mgy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                for j in 0..c {
                    gx.data_mut()[r * c + j] = is * (gr[j] - mg - y[j] * mgy);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Sum(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, *a, Tensor::full(r, c, g.item()));
        }
        Op::Mean(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
        }
        Op::SumRows(a) | Op::SumCols(a) => {
            let [r, c] = val(*a).shape();
            let gx = broadcast_zip(&Tensor::zeros(r, c), g, "sum_axis", |_, y| y);
            accumulate(grads, *a, gx);
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let [r, c] = val(i).shape();
                if rg(i) {
                    let part = g.data()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, i, Tensor::new(r, c, part).expect("concat rows"));
                }
                offset += r;
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            let total = g.cols();
            for &i in ids {
                let [r, c] = val(i).shape();
                if rg(i) {
                    let mut part = Vec::with_capacity(r * c);
                    for row in 0..r {
                        part.extend_from_slice(&g.data()[row * total + offset..row * total + offset + c]);
                    }
                    accumulate(grads, i, Tensor::new(r, c, part).expect("concat cols"));
                }
                offset += c;
            }
        }
        Op::SliceRows { x, start } => {
            let [r, c] = val(*x).shape();
            let mut gx = Tensor::zeros(r, c);
            gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, *x, gx);
        }
        Op::SliceCols { x, start } => {
            let [r, c] = val(*x).shape();
            let mut gx = Tensor::zeros(r, c);
            let w = g.cols();
            for row in 0..r {
                gx.data_mut()[row * c + start..row * c + start + w]
                    .copy_from_slice(&g.data()[row * w..(row + 1) * w]);
            }
            accumulate(grads, *x, gx);
        }
        Op::SquaredError(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let k = 2.0 * g.item() / av.len() as f64;
            let ga = av.zip_map(bv, |x, y| k * (x - y));
            if rg(*b) {
                accumulate(grads, *b, ga.scale(-1.0));
            }
            if rg(*a) {
                accumulate(grads, *a, ga);
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let x = val(*logits);
            let mut p = row_softmax(x);
            let k = g.item() / x.rows() as f64;
            for (r, &t) in targets.iter().enumerate() {
                let v = p.get(r, t) - 1.0;
                p.set(r, t, v);
            }
            accumulate(grads, *logits, p.scale(k));
        }
        Op::SoftCrossEntropy { logits, target } => {
            let x = val(*logits);
            let p = row_softmax(x);
            let k = g.item() / x.rows() as f64;
            let mut gx = p.clone();
            for r in 0..x.rows() {
                let mass: f64 = target.row_slice(r).iter().sum();
                for j in 0..x.cols() {
                    gx.set(r, j, k * (p.get(r, j) * mass - target.get(r, j)));
                }
            }
            accumulate(grads, *logits, gx);
        }
        Op::Gather { x, idx } => {
            let [r, c] = val(*x).shape();
            let mut gx = Tensor::zeros(r, c);
            for (row, &j) in idx.iter().enumerate() {
                gx.set(row, j, g.get(row, 0));
            }
            accumulate(grads, *x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// The value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "add", |x, y| x + y)
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "sub", |x, y| x - y)
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "mul", |x, y| x * y)
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let near_pole = {
            let nodes = self.tape.nodes.borrow();
            nodes[other.id].value.data().iter().any(|v| v.abs() < POLE_TOL)
        };
        if near_pole {
            self.tape.note_singular("div");
        }
        self.binary(other, Op::Div(self.id, other.id), |a, b| {
            broadcast_zip(a, b, "div", |x, y| x / y)
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.scale(-1.0))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |a| a.scale(k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|v| v + k))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            assert_eq!(
                a.cols(),
                b.rows(),
                "{}",
                AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape(),
                    right: b.shape()
                }
            );
            matmul_raw(a, b)
        })
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn log(self) -> Var<'t> {
        if self.value().data().iter().any(|&v| v < POLE_TOL) {
            self.tape.note_singular("log");
        }
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn relu(self) -> Var<'t> {
        if self.value().data().iter().any(|v| v.abs() < KINK_TOL) {
            self.tape.note_singular("relu");
        }
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn sqrt(self) -> Var<'t> {
        if self.value().data().iter().any(|&v| v < POLE_TOL) {
            self.tape.note_singular("sqrt");
        }
        self.unary(Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|v| v * v))
    }

    pub fn abs(self) -> Var<'t> {
        if self.value().data().iter().any(|v| v.abs() < KINK_TOL) {
            self.tape.note_singular("abs");
        }
        self.unary(Op::Abs(self.id), |a| a.map(f64::abs))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        if self
            .value()
            .data()
            .iter()
            .any(|&v| (v - lo).abs() < KINK_TOL || (v - hi).abs() < KINK_TOL)
        {
            self.tape.note_singular("clamp");
        }
        self.unary(Op::Clamp { x: self.id, lo, hi }, |a| a.map(|v| v.clamp(lo, hi)))
    }

    /// Elementwise minimum of two equally shaped variables. Ties route the
    /// gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "minimum: shape mismatch");
        if a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() < KINK_TOL) {
            self.tape.note_singular("minimum");
        }
        self.binary(other, Op::Minimum(self.id, other.id), |a, b| a.zip_map(b, f64::min))
    }

    /// Softmax across the columns of each row.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), row_softmax)
    }

    pub fn log_softmax(self) -> Var<'t> {
        self.unary(Op::LogSoftmax(self.id), |a| {
            let lse = row_logsumexp(a);
            let mut out = a.clone();
            let c = a.cols();
            for (r, l) in lse.iter().enumerate() {
                for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                    *v -= l;
                }
            }
            out
        })
    }

    /// Row-wise log-sum-exp, producing a column.
    pub fn logsumexp(self) -> Var<'t> {
        self.unary(Op::LogSumExp(self.id), |a| Tensor::column(&row_logsumexp(a)))
    }

    /// Scales every row to unit l2 norm (norm floored at [`L2_FLOOR`]).
    pub fn l2_normalize(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let norms: Vec<f64> = (0..x.rows())
            .map(|r| x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if norms.iter().any(|&n| n < KINK_TOL) {
            self.tape.note_singular("l2_normalize");
        }
        let mut out = x;
        for (r, &n) in norms.iter().enumerate() {
            let d = n.max(L2_FLOOR);
            for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                *v /= d;
            }
        }
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(out, Op::L2Normalize { x: self.id, norms }, rg)
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let n = c as f64;
        let mut out = x;
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(out, Op::LayerNorm { x: self.id, inv_std }, rg)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| Tensor::scalar(a.sum() / a.len() as f64))
    }

    /// Sum over rows, giving a `1×cols` row.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |a| {
            let mut out = vec![0.0; a.cols()];
            for r in 0..a.rows() {
                for (o, v) in out.iter_mut().zip(a.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::row(&out)
        })
    }

    pub fn mean_rows(self) -> Var<'t> {
        let n = self.shape()[0] as f64;
        self.sum_rows().scale(1.0 / n)
    }

    /// Sum over columns, giving a `rows×1` column.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |a| {
            Tensor::column(&(0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect::<Vec<_>>())
        })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        self.unary(Op::SliceRows { x: self.id, start }, |a| {
            assert!(start <= end && end <= a.rows(), "slice_rows out of range");
            let c = a.cols();
            Tensor::new(end - start, c, a.data()[start * c..end * c].to_vec()).expect("slice")
        })
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.unary(Op::SliceCols { x: self.id, start }, |a| {
            assert!(start <= end && end <= a.cols(), "slice_cols out of range");
            let c = a.cols();
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.data()[r * c + start..r * c + end]);
            }
            Tensor::new(a.rows(), end - start, data).expect("slice")
        })
    }

    pub fn row(self, r: usize) -> Var<'t> {
        self.slice_rows(r, r + 1)
    }

    /// Mean of squared differences, a scalar.
    pub fn squared_error(self, target: Var<'t>) -> Var<'t> {
        self.binary(target, Op::SquaredError(self.id, target.id), |a, b| {
            assert_eq!(a.shape(), b.shape(), "squared_error: shape mismatch");
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::scalar(s / a.len() as f64)
        })
    }

    /// Mean categorical cross-entropy of row logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'t> {
        let targets = targets.to_vec();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.rows(), targets.len(), "cross_entropy: one target per row");
            let lse = row_logsumexp(x);
            let s: f64 = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| lse[r] - x.get(r, t))
                .sum();
            Tensor::scalar(s / x.rows() as f64)
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets,
            },
            rg,
        )
    }

    /// Mean cross-entropy of row logits against fixed target distributions.
    pub fn soft_cross_entropy(self, target: &Tensor) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.shape(), target.shape(), "soft_cross_entropy: shape mismatch");
            let lse = row_logsumexp(x);
            let mut s = 0.0;
            for r in 0..x.rows() {
                for j in 0..x.cols() {
                    s -= target.get(r, j) * (x.get(r, j) - lse[r]);
                }
            }
            Tensor::scalar(s / x.rows() as f64)
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::SoftCrossEntropy {
                logits: self.id,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Picks one column per row, giving a column.
    pub fn gather(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.rows(), idx.len(), "gather: one index per row");
            Tensor::column(&idx.iter().enumerate().map(|(r, &j)| x.get(r, j)).collect::<Vec<_>>())
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Gather { x: self.id, idx }, rg)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stacks variables vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts.first().expect("concat_rows of nothing").tape;
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let c = nodes[ids[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let t = &nodes[i].value;
            assert_eq!(t.cols(), c, "concat_rows: column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        Tensor::new(rows, c, data).expect("concat")
    };
    let rg = tape.needs(&ids);
    tape.push(value, Op::ConcatRows(ids), rg)
}

/// Joins variables side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts.first().expect("concat_cols of nothing").tape;
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let r = nodes[ids[0]].value.rows();
        let total: usize = ids.iter().map(|&i| nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &i in &ids {
                let t = &nodes[i].value;
                assert_eq!(t.rows(), r, "concat_cols: row mismatch");
                data.extend_from_slice(t.row_slice(row));
            }
        }
        Tensor::new(r, total, data).expect("concat")
    };
    let rg = tape.needs(&ids);
    tape.push(value, Op::ConcatCols(ids), rg)
}
