use autodiff::{Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::sketch::RasterCanvas;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterEncoderConfig {
    pub canvas: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
}

impl Default for RasterEncoderConfig {
    fn default() -> Self {
        Self {
            canvas: 32,
            patch: 8,
            channels: 32,
            dim: 64,
        }
    }
}

impl RasterEncoderConfig {
    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Splits a canvas into non-overlapping square patches, one flattened patch
/// per row, cells in row-major grid order.
pub fn canvas_patches(canvas: &RasterCanvas, patch: usize) -> Tensor {
    let g = canvas.height() / patch;
    let gw = canvas.width() / patch;
    let mut data = Vec::with_capacity(g * gw * patch * patch);
    for gr in 0..g {
        for gc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(canvas.get(gr * patch + r, gc * patch + c));
                }
            }
        }
    }
    Tensor::new(g * gw, patch * patch, data).expect("patch layout")
}

/// Patch-pooling encoder with soft spatial attention.
///
/// `B = tanh(patches·W + b + pos)` is the cell feature map, attention
/// weights are a softmax over cells of `B·w_att`, and the attended map
/// `B + B ⊙ att` is mean-pooled and l2-normalised into the state `s′`. The
/// embedding is `normalize(g_φ(s′))`.
#[derive(Debug, Clone)]
pub struct RasterEncoder {
    cfg: RasterEncoderConfig,
    pub patch: Linear,
    pub pos: Param,
    pub att: Linear,
    pub head: Linear,
}

impl RasterEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: RasterEncoderConfig, rng: &mut R) -> Self {
        assert!(cfg.patch > 0 && cfg.canvas % cfg.patch == 0, "canvas must tile into patches");
        Self {
            cfg,
            patch: Linear::new(&format!("{name}.patch"), cfg.patch * cfg.patch, cfg.channels, rng),
            pos: Param::new(format!("{name}.pos"), Tensor::randn(cfg.cells(), cfg.channels, 0.1, rng)),
            att: Linear::new(&format!("{name}.att"), cfg.channels, 1, rng),
            head: Linear::new(&format!("{name}.head"), cfg.channels, cfg.dim, rng),
        }
    }

    pub fn config(&self) -> RasterEncoderConfig {
        self.cfg
    }

    pub fn check(&self, canvas: &RasterCanvas) -> Result<()> {
        let want = [self.cfg.canvas, self.cfg.canvas];
        if canvas.dims() != want {
            return Err(SketchError::DimensionMismatch {
                expected: want,
                got: canvas.dims(),
            });
        }
        Ok(())
    }

    /// Cell feature map `B`, one row per cell.
    pub fn feature_map<'t>(&self, tape: &'t Tape, canvas: &RasterCanvas) -> Result<Var<'t>> {
        self.check(canvas)?;
        let x = tape.constant(canvas_patches(canvas, self.cfg.patch));
        Ok(self.patch.forward(tape, x).add(tape.param(&self.pos)).tanh())
    }

    /// Attention weights over cells, as a column summing to one.
    pub fn attention<'t>(&self, tape: &'t Tape, b: Var<'t>) -> Var<'t> {
        self.att.forward(tape, b).transpose().softmax().transpose()
    }

    /// The pooled, normalised state `s′` (1×channels).
    pub fn state<'t>(&self, tape: &'t Tape, canvas: &RasterCanvas) -> Result<Var<'t>> {
        let b = self.feature_map(tape, canvas)?;
        let att = self.attention(tape, b);
        Ok(b.add(b.mul(att)).mean_rows().l2_normalize())
    }

    /// Maps a state to a unit-norm embedding through `g_φ`.
    pub fn project<'t>(&self, tape: &'t Tape, state: Var<'t>) -> Var<'t> {
        self.head.forward(tape, state).l2_normalize()
    }

    pub fn embed<'t>(&self, tape: &'t Tape, canvas: &RasterCanvas) -> Result<Var<'t>> {
        let s = self.state(tape, canvas)?;
        Ok(self.project(tape, s))
    }

    pub fn embed_plain(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        Ok(self.embed(&tape, canvas)?.value().into_data())
    }

    pub fn state_plain(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        Ok(self.state(&tape, canvas)?.value().into_data())
    }

    pub fn attention_plain(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let b = self.feature_map(&tape, canvas)?;
        Ok(self.attention(&tape, b).value().into_data())
    }
}

impl Module for RasterEncoder {
    fn params(&self) -> Vec<&Param> {
        vec![&self.patch.w, &self.patch.b, &self.pos, &self.att.w, &self.att.b, &self.head.w, &self.head.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.patch.w,
            &mut self.patch.b,
            &mut self.pos,
            &mut self.att.w,
            &mut self.att.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }
}
