use rand::Rng;

use crate::param::{Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x·W + b` over row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(&self.w)).add(tape.param(&self.b))
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul(&self.w.value).expect("linear: input width");
        let b = self.b.value.data();
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}
