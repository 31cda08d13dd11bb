//! Every differentiable operation paired with an input generator, so the
//! whole op set can be swept by gradient checks.

use rand::rngs::StdRng;
use rand::Rng;

use crate::tape::{concat_cols, concat_rows, Tape, Var};
use crate::tensor::Tensor;

pub type InputGen = fn(&mut StdRng) -> Vec<Tensor>;
pub type ScalarFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: InputGen,
    pub f: ScalarFn,
}

/// Reduces any output to a scalar with fixed, uneven weights so that every
/// output entry influences the loss differently.
fn project<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
    let [r, c] = v.shape();
    let w: Vec<f64> = (0..r * c).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
    v.mul(tape.constant(Tensor::new(r, c, w).expect("shape"))).sum()
}

fn randn(rng: &mut StdRng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

fn one(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 4)]
}

fn two(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 4), randn(rng, 3, 4)]
}

fn positive(rng: &mut StdRng) -> Vec<Tensor> {
    vec![Tensor::uniform(3, 4, 0.2, 3.0, rng)]
}

fn denominators(rng: &mut StdRng) -> Vec<Tensor> {
    let num = randn(rng, 3, 4);
    let mut den = Tensor::uniform(3, 4, 0.5, 2.0, rng);
    for v in den.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    vec![num, den]
}

fn row_broadcast(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 4), randn(rng, 1, 4)]
}

fn col_broadcast(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 4), randn(rng, 3, 1)]
}

fn matmul_inputs(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 4), randn(rng, 4, 2)]
}

fn concat_inputs(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 2, 4), randn(rng, 3, 4)]
}

fn concat_col_inputs(rng: &mut StdRng) -> Vec<Tensor> {
    vec![randn(rng, 3, 2), randn(rng, 3, 3)]
}

fn soft_target() -> Tensor {
    Tensor::from_rows(&[
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.25, 0.25, 0.25, 0.25],
        vec![0.7, 0.0, 0.1, 0.2],
    ])
    .expect("shape")
}

fn scaled_rows(rng: &mut StdRng) -> Vec<Tensor> {
    let s: f64 = rng.random_range(0.5..3.0);
    vec![randn(rng, 3, 4).scale(s)]
}

pub fn registered_ops() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: two, f: |t, v| project(t, v[0].add(v[1])) },
        OpCase { name: "add_row_broadcast", inputs: row_broadcast, f: |t, v| project(t, v[0].add(v[1])) },
        OpCase { name: "sub", inputs: two, f: |t, v| project(t, v[0].sub(v[1])) },
        OpCase { name: "sub_col_broadcast", inputs: col_broadcast, f: |t, v| project(t, v[0].sub(v[1])) },
        OpCase { name: "mul", inputs: two, f: |t, v| project(t, v[0].mul(v[1])) },
        OpCase { name: "mul_col_broadcast", inputs: col_broadcast, f: |t, v| project(t, v[0].mul(v[1])) },
        OpCase { name: "div", inputs: denominators, f: |t, v| project(t, v[0].div(v[1])) },
        OpCase { name: "neg", inputs: one, f: |t, v| project(t, v[0].neg()) },
        OpCase { name: "scale", inputs: one, f: |t, v| project(t, v[0].scale(-2.5)) },
        OpCase { name: "add_scalar", inputs: one, f: |t, v| project(t, v[0].add_scalar(0.75)) },
        OpCase { name: "matmul", inputs: matmul_inputs, f: |t, v| project(t, v[0].matmul(v[1])) },
        OpCase { name: "transpose", inputs: one, f: |t, v| project(t, v[0].transpose()) },
        OpCase { name: "tanh", inputs: one, f: |t, v| project(t, v[0].tanh()) },
        OpCase { name: "sigmoid", inputs: one, f: |t, v| project(t, v[0].sigmoid()) },
        OpCase { name: "exp", inputs: one, f: |t, v| project(t, v[0].exp()) },
        OpCase { name: "log", inputs: positive, f: |t, v| project(t, v[0].log()) },
        OpCase { name: "relu", inputs: one, f: |t, v| project(t, v[0].relu()) },
        OpCase { name: "sqrt", inputs: positive, f: |t, v| project(t, v[0].sqrt()) },
        OpCase { name: "square", inputs: one, f: |t, v| project(t, v[0].square()) },
        OpCase { name: "abs", inputs: one, f: |t, v| project(t, v[0].abs()) },
        OpCase { name: "clamp", inputs: one, f: |t, v| project(t, v[0].clamp(-0.5, 0.5)) },
        OpCase { name: "minimum", inputs: two, f: |t, v| project(t, v[0].minimum(v[1])) },
        OpCase { name: "softmax", inputs: one, f: |t, v| project(t, v[0].softmax()) },
        OpCase { name: "log_softmax", inputs: one, f: |t, v| project(t, v[0].log_softmax()) },
        OpCase { name: "logsumexp", inputs: one, f: |t, v| project(t, v[0].logsumexp()) },
        OpCase { name: "l2_normalize", inputs: scaled_rows, f: |t, v| project(t, v[0].l2_normalize()) },
        OpCase { name: "layer_norm", inputs: one, f: |t, v| project(t, v[0].layer_norm()) },
        OpCase { name: "sum", inputs: one, f: |_, v| v[0].square().sum() },
        OpCase { name: "mean", inputs: one, f: |_, v| v[0].tanh().mean() },
        OpCase { name: "sum_rows", inputs: one, f: |t, v| project(t, v[0].sum_rows()) },
        OpCase { name: "sum_cols", inputs: one, f: |t, v| project(t, v[0].sum_cols()) },
        OpCase { name: "mean_rows", inputs: one, f: |t, v| project(t, v[0].mean_rows()) },
        OpCase { name: "concat_rows", inputs: concat_inputs, f: |t, v| project(t, concat_rows(&[v[0], v[1]]).tanh()) },
        OpCase { name: "concat_cols", inputs: concat_col_inputs, f: |t, v| project(t, concat_cols(&[v[0], v[1]]).tanh()) },
        OpCase { name: "slice_rows", inputs: one, f: |t, v| project(t, v[0].slice_rows(1, 3)) },
        OpCase { name: "slice_cols", inputs: one, f: |t, v| project(t, v[0].slice_cols(1, 3)) },
        OpCase { name: "squared_error", inputs: two, f: |_, v| v[0].squared_error(v[1]) },
        OpCase { name: "cross_entropy", inputs: one, f: |_, v| v[0].cross_entropy(&[0, 3, 1]) },
        OpCase { name: "soft_cross_entropy", inputs: one, f: |_, v| v[0].soft_cross_entropy(&soft_target()) },
        OpCase { name: "gather", inputs: one, f: |t, v| project(t, v[0].gather(&[2, 0, 3])) },
        OpCase {
            name: "softmax_cross_entropy_composite",
            inputs: matmul_inputs,
            f: |_, v| v[0].matmul(v[1]).tanh().cross_entropy(&[1, 0, 1]),
        },
    ]
}
