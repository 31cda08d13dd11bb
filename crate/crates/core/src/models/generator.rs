//! Photo-to-sketch generator: patch feature grid, variational latent,
//! glimpse attention and a recurrent GMM decoder.

use autodiff::{concat_cols, Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gmm::{gmm_nll_var, GmmHead, GmmParams};
use super::gru::GruCell;
use super::raster::canvas_patches;
use crate::error::{Result, SketchError};
use crate::sketch::{PenState, RasterCanvas, VectorSketch};

/// Decoding starts from the canvas centre.
pub const START: [f64; 2] = [0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub canvas: usize,
    pub patch: usize,
    pub channels: usize,
    pub latent: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub components: usize,
    pub max_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas: 32,
            patch: 8,
            channels: 32,
            latent: 128,
            hidden: 64,
            att_dim: 16,
            components: 20,
            max_len: 100,
        }
    }
}

/// One decoded step, with enough context to re-score it on a fresh tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub dx: f64,
    pub dy: f64,
    pub pen: usize,
    /// Decoder state `h_t` that produced this step.
    pub hidden: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GeneratedSequence {
    pub steps: Vec<StepRecord>,
    pub sketch: VectorSketch,
}

/// Per-photo quantities shared across decoding steps.
pub struct PhotoContext<'t> {
    pub grid: Var<'t>,
    /// Neighbourhood aggregation `W_B ⊛ B` (cells × att_dim).
    pub agg: Var<'t>,
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct SketchGenerator {
    cfg: GeneratorConfig,
    pub patch: Linear,
    pub pos: Param,
    pub enc_mu: Linear,
    pub enc_log_sigma: Linear,
    pub init: Linear,
    pub w_b: Param,
    pub w_s: Linear,
    pub w_a: Param,
    pub cell: GruCell,
    pub out: GmmHead,
    shifts: Tensor,
}

/// `[S_1 | … | S_9]`, the nine 3×3 neighbourhood shift operators over a
/// `g×g` grid, concatenated horizontally (cells × 9·cells).
fn shift_operators(g: usize) -> Tensor {
    let cells = g * g;
    let mut t = Tensor::zeros(cells, 9 * cells);
    let mut k = 0;
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            for r in 0..g as i64 {
                for c in 0..g as i64 {
                    let (nr, nc) = (r + di, c + dj);
                    if nr >= 0 && nc >= 0 && nr < g as i64 && nc < g as i64 {
                        let i = (r * g as i64 + c) as usize;
                        let j = (nr * g as i64 + nc) as usize;
                        t.set(i, k * cells + j, 1.0);
                    }
                }
            }
            k += 1;
        }
    }
    t
}

/// Offsets and pen states of a sketch, the first offset taken from [`START`].
pub fn to_sequence(sketch: &VectorSketch) -> Vec<(f64, f64, usize)> {
    let mut prev = START;
    sketch
        .points()
        .map(|p| {
            let s = (p.x - prev[0], p.y - prev[1], p.pen.index());
            prev = p.xy();
            s
        })
        .collect()
}

/// Inverse of [`to_sequence`]; coordinates are clamped to the canvas and
/// decoding stops at the first end-of-drawing state.
pub fn from_sequence(steps: &[(f64, f64, usize)]) -> VectorSketch {
    let mut strokes: Vec<Vec<[f64; 2]>> = vec![Vec::new()];
    let [mut x, mut y] = START;
    for &(dx, dy, pen) in steps {
        x = (x + dx).clamp(0.0, 1.0);
        y = (y + dy).clamp(0.0, 1.0);
        strokes.last_mut().expect("non-empty").push([x, y]);
        match PenState::from_index(pen) {
            PenState::Down => {}
            PenState::Up => strokes.push(Vec::new()),
            PenState::End => break,
        }
    }
    VectorSketch::from_polylines_clamped(strokes)
}

fn prev_row(step: Option<(f64, f64, usize)>) -> Vec<f64> {
    match step {
        None => vec![0.0, 0.0, 1.0, 0.0, 0.0],
        Some((dx, dy, pen)) => {
            let q = PenState::from_index(pen).one_hot();
            vec![dx, dy, q[0], q[1], q[2]]
        }
    }
}

impl SketchGenerator {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: GeneratorConfig, rng: &mut R) -> Self {
        let g = cfg.canvas / cfg.patch;
        let mut enc_log_sigma = Linear::new(&format!("{name}.enc_log_sigma"), cfg.channels, cfg.latent, rng);
        enc_log_sigma.w.value = enc_log_sigma.w.value.scale(0.1);
        Self {
            cfg,
            patch: Linear::new(&format!("{name}.patch"), cfg.patch * cfg.patch, cfg.channels, rng),
            pos: Param::new(format!("{name}.pos"), Tensor::randn(g * g, cfg.channels, 0.1, rng)),
            enc_mu: Linear::new(&format!("{name}.enc_mu"), cfg.channels, cfg.latent, rng),
            enc_log_sigma,
            init: Linear::new(&format!("{name}.init"), cfg.latent, cfg.hidden, rng),
            w_b: Param::new(
                format!("{name}.w_b"),
                Tensor::glorot(9 * cfg.channels, cfg.att_dim, rng),
            ),
            w_s: Linear::new(&format!("{name}.w_s"), cfg.hidden, cfg.att_dim, rng),
            w_a: Param::new(format!("{name}.w_a"), Tensor::glorot(cfg.att_dim, 1, rng)),
            cell: GruCell::new(&format!("{name}.cell"), cfg.channels + 5, cfg.hidden, rng),
            out: GmmHead::new(&format!("{name}.out"), cfg.hidden, cfg.components, rng),
            shifts: shift_operators(g),
        }
    }

    pub fn config(&self) -> GeneratorConfig {
        self.cfg
    }

    pub fn context<'t>(&self, tape: &'t Tape, photo: &RasterCanvas) -> Result<PhotoContext<'t>> {
        let want = [self.cfg.canvas, self.cfg.canvas];
        if photo.dims() != want {
            return Err(SketchError::DimensionMismatch {
                expected: want,
                got: photo.dims(),
            });
        }
        let x = tape.constant(canvas_patches(photo, self.cfg.patch));
        let grid = self.patch.forward(tape, x).add(tape.param(&self.pos)).tanh();
        let agg = self.aggregate(tape, grid);
        let pooled = grid.mean_rows();
        Ok(PhotoContext {
            grid,
            agg,
            mu: self.enc_mu.forward(tape, pooled),
            log_sigma: self.enc_log_sigma.forward(tape, pooled),
        })
    }

    /// `W_B ⊛ B`: each cell sums its 3×3 neighbourhood, one weight block per
    /// neighbour offset.
    pub fn aggregate<'t>(&self, tape: &'t Tape, grid: Var<'t>) -> Var<'t> {
        let cells = grid.shape()[0];
        let s = tape.constant(self.shifts.clone());
        let shifted: Vec<Var<'t>> = (0..9)
            .map(|k| s.slice_cols(k * cells, (k + 1) * cells).matmul(grid))
            .collect();
        concat_cols(&shifted).matmul(tape.param(&self.w_b))
    }

    /// Attention weights over cells (1×cells) for decoder state `h`.
    pub fn glimpse_weights<'t>(&self, tape: &'t Tape, agg: Var<'t>, h: Var<'t>) -> Var<'t> {
        let j = agg.add(self.w_s.forward(tape, h)).tanh();
        j.matmul(tape.param(&self.w_a)).transpose().softmax()
    }

    /// Glimpse vector `g_t = Σ α_ij B_ij`.
    pub fn glimpse<'t>(&self, tape: &'t Tape, ctx: &PhotoContext<'t>, h: Var<'t>) -> Var<'t> {
        self.glimpse_weights(tape, ctx.agg, h).matmul(ctx.grid)
    }

    pub fn initial_state<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Var<'t> {
        self.init.forward(tape, z).tanh()
    }

    /// Reparameterised latent sample `z = μ + σ ⊙ ξ`.
    pub fn latent<'t, R: Rng + ?Sized>(&self, tape: &'t Tape, ctx: &PhotoContext<'t>, rng: &mut R) -> Var<'t> {
        let xi: Vec<f64> = (0..self.cfg.latent).map(|_| StandardNormal.sample(rng)).collect();
        ctx.mu.add(ctx.log_sigma.exp().mul(tape.constant(Tensor::row(&xi))))
    }

    /// `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dimensions.
    pub fn kl<'t>(&self, ctx: &PhotoContext<'t>) -> Var<'t> {
        let ls = ctx.log_sigma;
        ctx.mu
            .square()
            .add(ls.scale(2.0).exp())
            .sub(ls.scale(2.0))
            .add_scalar(-1.0)
            .sum()
            .scale(0.5)
    }

    fn step<'t>(&self, tape: &'t Tape, ctx: &PhotoContext<'t>, h: Var<'t>, prev: &[f64]) -> (Var<'t>, Var<'t>) {
        let g = self.glimpse(tape, ctx, h);
        let x = concat_cols(&[g, tape.constant(Tensor::row(prev))]);
        let h = self.cell.step(tape, x, h);
        (h, self.out.forward(tape, h))
    }

    /// Teacher-forced reconstruction loss (mean per step of offset NLL plus
    /// pen cross-entropy) and the KL term.
    pub fn vae_terms<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        photo: &RasterCanvas,
        target: &[(f64, f64, usize)],
        rng: &mut R,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if target.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        let ctx = self.context(tape, photo)?;
        let z = self.latent(tape, &ctx, rng);
        let mut h = self.initial_state(tape, z);
        let steps = &target[..target.len().min(self.cfg.max_len)];
        let mut terms = Vec::with_capacity(steps.len());
        let mut prev = None;
        for &(dx, dy, pen) in steps {
            let (h2, y) = self.step(tape, &ctx, h, &prev_row(prev));
            h = h2;
            let (nll, ce) = gmm_nll_var(tape, y, self.cfg.components, dx, dy, pen);
            terms.push(nll.add(ce));
            prev = Some((dx, dy, pen));
        }
        let recon = autodiff::concat_rows(&terms).mean();
        Ok((recon, self.kl(&ctx)))
    }

    /// Decodes a sketch for `photo`. Greedy decoding uses the posterior mean
    /// latent and mixture modes; otherwise everything is sampled.
    pub fn generate<R: Rng + ?Sized>(&self, photo: &RasterCanvas, greedy: bool, rng: &mut R) -> Result<GeneratedSequence> {
        let tape = Tape::inference();
        let ctx = self.context(&tape, photo)?;
        let z = if greedy { ctx.mu } else { self.latent(&tape, &ctx, rng) };
        let mut h = self.initial_state(&tape, z);
        let mut steps = Vec::new();
        let mut prev = None;
        for _ in 0..self.cfg.max_len {
            let (h2, y) = self.step(&tape, &ctx, h, &prev_row(prev));
            h = h2;
            let params = GmmParams::from_raw(y.value().data(), self.cfg.components);
            let (dx, dy, pen) = if greedy { params.mode() } else { params.sample(rng) };
            steps.push(StepRecord {
                dx,
                dy,
                pen,
                hidden: h.value().into_data(),
            });
            prev = Some((dx, dy, pen));
            if pen == PenState::End.index() {
                break;
            }
        }
        let seq: Vec<(f64, f64, usize)> = steps.iter().map(|s| (s.dx, s.dy, s.pen)).collect();
        Ok(GeneratedSequence {
            sketch: from_sequence(&seq),
            steps,
        })
    }

    /// `Σ_t log p(Δ_t) + log p(pen_t)` of recorded steps as a function of the
    /// output layer only.
    pub fn output_log_prob<'t>(&self, tape: &'t Tape, steps: &[StepRecord]) -> Var<'t> {
        let terms: Vec<Var<'t>> = steps
            .iter()
            .map(|s| {
                let h = tape.constant(Tensor::row(&s.hidden));
                let y = self.out.forward(tape, h);
                let (nll, ce) = gmm_nll_var(tape, y, self.cfg.components, s.dx, s.dy, s.pen);
                nll.add(ce).neg()
            })
            .collect();
        autodiff::concat_rows(&terms).sum()
    }

    /// The decoder's final fully-connected layer `W_y, b_y`.
    pub fn output_params_mut(&mut self) -> Vec<&mut Param> {
        self.out.params_mut()
    }
}

impl Module for SketchGenerator {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.patch.w, &self.patch.b, &self.pos];
        v.extend(self.enc_mu.params());
        v.extend(self.enc_log_sigma.params());
        v.extend(self.init.params());
        v.push(&self.w_b);
        v.extend(self.w_s.params());
        v.push(&self.w_a);
        v.extend(self.cell.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.patch.w, &mut self.patch.b, &mut self.pos];
        v.extend(self.enc_mu.params_mut());
        v.extend(self.enc_log_sigma.params_mut());
        v.extend(self.init.params_mut());
        v.push(&mut self.w_b);
        v.extend(self.w_s.params_mut());
        v.push(&mut self.w_a);
        v.extend(self.cell.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}
