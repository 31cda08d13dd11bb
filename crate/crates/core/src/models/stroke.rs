use autodiff::{concat_rows, Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;

use super::gru::GruCell;
use crate::error::{Result, SketchError};
use crate::sketch::VectorSketch;

/// State-value head: a dense layer over mean-pooled features.
#[derive(Debug, Clone)]
pub struct ValueHead {
    pub lin: Linear,
}

impl ValueHead {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(name, dim, 1, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Var<'t> {
        self.lin.forward(tape, features.mean_rows())
    }
}

impl Module for ValueHead {
    fn params(&self) -> Vec<&Param> {
        self.lin.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.lin.params_mut()
    }
}

/// Output of [`StrokeHierEncoder::encode`].
pub struct StrokeEncoding<'t> {
    /// Local per-stroke features `f^l` (K×d).
    pub local: Var<'t>,
    /// Global context features `f^g` (K×d).
    pub global: Var<'t>,
    /// Fused features `layer_norm(f^l + f^g)` (K×d).
    pub fused: Var<'t>,
    /// Per-stroke logits, column 0 = select, column 1 = ignore.
    pub logits: Var<'t>,
    /// Row-wise softmax of `logits`.
    pub probs: Var<'t>,
}

/// Two-level recurrent stroke encoder with a per-stroke select/ignore head
/// and a value head over the fused features.
#[derive(Debug, Clone)]
pub struct StrokeHierEncoder {
    pub local: GruCell,
    pub global: GruCell,
    pub head: Linear,
    pub value: ValueHead,
}

impl StrokeHierEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            local: GruCell::new(&format!("{name}.local"), 2, hidden, rng),
            global: GruCell::new(&format!("{name}.global"), hidden, hidden, rng),
            head: Linear::new(&format!("{name}.head"), hidden, 2, rng),
            value: ValueHead::new(&format!("{name}.value"), hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.local.hidden()
    }

    pub fn encode<'t>(&self, tape: &'t Tape, sketch: &VectorSketch) -> Result<StrokeEncoding<'t>> {
        if sketch.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        let locals: Vec<Var<'t>> = sketch
            .strokes()
            .iter()
            .map(|s| {
                let rows: Vec<Vec<f64>> = s.coords().iter().map(|p| p.to_vec()).collect();
                let xs = tape.constant(Tensor::from_rows(&rows).expect("points"));
                *self.local.run(tape, xs).last().expect("stroke has points")
            })
            .collect();
        let local = concat_rows(&locals);
        let global = concat_rows(&self.global.run(tape, local));
        let fused = local.add(global).layer_norm();
        let logits = self.head.forward(tape, fused);
        let probs = logits.softmax();
        Ok(StrokeEncoding {
            local,
            global,
            fused,
            logits,
            probs,
        })
    }

    pub fn value<'t>(&self, tape: &'t Tape, enc: &StrokeEncoding<'t>) -> Var<'t> {
        self.value.forward(tape, enc.fused)
    }

    /// Per-stroke select probabilities.
    pub fn select_probs(&self, sketch: &VectorSketch) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let enc = self.encode(&tape, sketch)?;
        let p = enc.probs.value();
        Ok((0..p.rows()).map(|r| p.get(r, 0)).collect())
    }

    /// Predicted value `V(S)` of a sketch.
    pub fn value_plain(&self, sketch: &VectorSketch) -> Result<f64> {
        let tape = Tape::inference();
        let enc = self.encode(&tape, sketch)?;
        Ok(self.value(&tape, &enc).item())
    }
}

impl Module for StrokeHierEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.local.params();
        v.extend(self.global.params());
        v.extend(self.head.params());
        v.extend(self.value.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.local.params_mut();
        v.extend(self.global.params_mut());
        v.extend(self.head.params_mut());
        v.extend(self.value.params_mut());
        v
    }
}
