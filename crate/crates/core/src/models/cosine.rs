use autodiff::{Module, Param, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Result, SketchError};

/// `softmax(Ŵ · f/‖f‖)` with rows of `W` l2-normalised on use.
#[derive(Debug, Clone)]
pub struct CosineClassifier {
    pub w: Param,
}

impl CosineClassifier {
    pub fn new<R: Rng + ?Sized>(name: &str, classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), Tensor::randn(classes, dim, 1.0, rng)),
        }
    }

    pub fn from_weights(name: &str, w: Tensor) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), w),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    /// Cosine logits of feature rows against weight rows `w`.
    pub fn logits_with<'t>(w: Var<'t>, features: Var<'t>) -> Var<'t> {
        features.l2_normalize().matmul(w.l2_normalize().transpose())
    }

    pub fn logits<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Var<'t> {
        Self::logits_with(tape.param(&self.w), features)
    }

    pub fn classify(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.iter().all(|&v| v == 0.0) {
            return Err(SketchError::InvalidArgument("zero feature".into()));
        }
        let tape = Tape::inference();
        let f = tape.constant(Tensor::row(feature));
        Ok(self.logits(&tape, f).softmax().value().into_data())
    }
}

impl Module for CosineClassifier {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w]
    }
}
