use autodiff::{Module, Param, Tape, Tensor, Var};
use rand::Rng;

/// Single-head graph attention over classifier weight vectors:
/// `W ← W + softmax((W V_a)(W V_b)ᵀ) · W V_c`.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub va: Param,
    pub vb: Param,
    pub vc: Param,
    pub iterations: usize,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        let s = (1.0 / dim as f64).sqrt();
        Self {
            va: Param::new(format!("{name}.va"), Tensor::randn(dim, dim, s, rng)),
            vb: Param::new(format!("{name}.vb"), Tensor::randn(dim, dim, s, rng)),
            vc: Param::new(format!("{name}.vc"), Tensor::randn(dim, dim, 0.1 * s, rng)),
            iterations: 1,
        }
    }

    /// Attention matrix `a_ij` for node features `w` (rows).
    pub fn attention<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let a = w.matmul(tape.param(&self.va));
        let b = w.matmul(tape.param(&self.vb));
        a.matmul(b.transpose()).softmax()
    }

    pub fn refine_once<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let att = self.attention(tape, w);
        w.add(att.matmul(w.matmul(tape.param(&self.vc))))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        (0..self.iterations).fold(w, |w, _| self.refine_once(tape, w))
    }

    pub fn refine_plain(&self, w: &Tensor) -> Tensor {
        let tape = Tape::inference();
        self.forward(&tape, tape.constant(w.clone())).value()
    }
}

impl Module for GatLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.va, &self.vb, &self.vc]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.va, &mut self.vb, &mut self.vc]
    }
}
