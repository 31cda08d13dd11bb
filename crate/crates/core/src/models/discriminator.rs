use autodiff::{concat_cols, Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Result, SketchError};
use crate::sketch::RasterCanvas;

/// Real/synthetic classifier over a downsampled photo and sketch raster
/// placed side by side.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub hidden: Linear,
    pub out: Linear,
    factor: usize,
    canvas: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(name: &str, canvas: usize, factor: usize, hidden: usize, rng: &mut R) -> Self {
        let side = canvas / factor;
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), 2 * side * side, hidden, rng),
            out: Linear::new(&format!("{name}.out"), hidden, 1, rng),
            factor,
            canvas,
        }
    }

    fn input(&self, photo: &RasterCanvas, sketch: &RasterCanvas) -> Result<Tensor> {
        for c in [photo, sketch] {
            if c.dims() != [self.canvas, self.canvas] {
                return Err(SketchError::DimensionMismatch {
                    expected: [self.canvas, self.canvas],
                    got: c.dims(),
                });
            }
        }
        let mut v = photo.downsample(self.factor).data().to_vec();
        v.extend_from_slice(sketch.downsample(self.factor).data());
        Ok(Tensor::row(&v))
    }

    /// Probability that the pair is real (1×1).
    pub fn forward<'t>(&self, tape: &'t Tape, photo: &RasterCanvas, sketch: &RasterCanvas) -> Result<Var<'t>> {
        let x = tape.constant(self.input(photo, sketch)?);
        let h = self.hidden.forward(tape, x).tanh();
        Ok(self.out.forward(tape, h).sigmoid())
    }

    pub fn score(&self, photo: &RasterCanvas, sketch: &RasterCanvas) -> Result<f64> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, photo, sketch)?.item())
    }

    /// Mean binary cross-entropy, label 1 for `real` pairs and 0 for `fake`.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        real: &[(&RasterCanvas, &RasterCanvas)],
        fake: &[(&RasterCanvas, &RasterCanvas)],
    ) -> Result<Var<'t>> {
        let mut terms = Vec::new();
        for (p, s) in real {
            terms.push(self.forward(tape, p, s)?.clamp(1e-12, 1.0).log().neg());
        }
        for (p, s) in fake {
            let d = self.forward(tape, p, s)?;
            terms.push(d.neg().add_scalar(1.0).clamp(1e-12, 1.0).log().neg());
        }
        if terms.is_empty() {
            return Err(SketchError::InvalidArgument("discriminator loss over no pairs".into()));
        }
        Ok(concat_cols(&terms).mean())
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}
