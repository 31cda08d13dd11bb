//! Bivariate Gaussian mixture over pen offsets plus a categorical pen state.
//!
//! Raw decoder output layout (`6M + 3` columns): mixture logits, `μx`, `μy`,
//! `log σx`, `log σy`, raw correlation, each `M` wide, then 3 pen logits.

use std::f64::consts::PI;

use autodiff::{Linear, Module, Param, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GMM_SIGMA_FLOOR: f64 = 1e-3;
pub const GMM_RHO_MAX: f64 = 0.999;
const SIGMA_CEIL: f64 = 1e3;

/// Output layer `y = W_y h + b_y` producing mixture parameters.
#[derive(Debug, Clone)]
pub struct GmmHead {
    pub out: Linear,
    pub components: usize,
}

impl GmmHead {
    pub fn new<R: Rng + ?Sized>(name: &str, hidden: usize, components: usize, rng: &mut R) -> Self {
        Self {
            out: Linear::new(name, hidden, 6 * components + 3, rng),
            components,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Var<'t> {
        self.out.forward(tape, h)
    }
}

impl Module for GmmHead {
    fn params(&self) -> Vec<&Param> {
        self.out.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.out.params_mut()
    }
}

/// Negative log-likelihood of one offset and pen state under raw output `y`
/// (a single row). Returns `(offset_nll, pen_ce)`.
pub fn gmm_nll_var<'t>(tape: &'t Tape, y: Var<'t>, m: usize, dx: f64, dy: f64, pen: usize) -> (Var<'t>, Var<'t>) {
    let log_pi = y.slice_cols(0, m).log_softmax();
    let mx = y.slice_cols(m, 2 * m);
    let my = y.slice_cols(2 * m, 3 * m);
    let sx = y.slice_cols(3 * m, 4 * m).exp().clamp(GMM_SIGMA_FLOOR, SIGMA_CEIL);
    let sy = y.slice_cols(4 * m, 5 * m).exp().clamp(GMM_SIGMA_FLOOR, SIGMA_CEIL);
    let rho = y.slice_cols(5 * m, 6 * m).tanh().clamp(-GMM_RHO_MAX, GMM_RHO_MAX);
    let zx = tape.scalar(dx).sub(mx).div(sx);
    let zy = tape.scalar(dy).sub(my).div(sy);
    let one_m_r2 = rho.square().neg().add_scalar(1.0);
    let z = zx.square().add(zy.square()).sub(zx.mul(zy).mul(rho).scale(2.0));
    let log_n = z
        .div(one_m_r2.scale(2.0))
        .neg()
        .sub(sx.log())
        .sub(sy.log())
        .sub(one_m_r2.log().scale(0.5))
        .add_scalar(-(2.0 * PI).ln());
    let nll = log_pi.add(log_n).logsumexp().neg();
    let ce = y.slice_cols(6 * m, 6 * m + 3).cross_entropy(&[pen]);
    (nll, ce)
}

/// Decoded mixture parameters as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub rho: Vec<f64>,
    pub pen: [f64; 3],
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl GmmParams {
    pub fn from_raw(y: &[f64], m: usize) -> Self {
        assert_eq!(y.len(), 6 * m + 3, "raw GMM output width");
        let pen = softmax(&y[6 * m..]);
        Self {
            pi: softmax(&y[..m]),
            mu_x: y[m..2 * m].to_vec(),
            mu_y: y[2 * m..3 * m].to_vec(),
            sigma_x: y[3 * m..4 * m].iter().map(|v| v.exp().clamp(GMM_SIGMA_FLOOR, SIGMA_CEIL)).collect(),
            sigma_y: y[4 * m..5 * m].iter().map(|v| v.exp().clamp(GMM_SIGMA_FLOOR, SIGMA_CEIL)).collect(),
            rho: y[5 * m..6 * m].iter().map(|v| v.tanh().clamp(-GMM_RHO_MAX, GMM_RHO_MAX)).collect(),
            pen: [pen[0], pen[1], pen[2]],
        }
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn component_density(&self, j: usize, x: f64, y: f64) -> f64 {
        let (sx, sy, r) = (self.sigma_x[j], self.sigma_y[j], self.rho[j]);
        let zx = (x - self.mu_x[j]) / sx;
        let zy = (y - self.mu_y[j]) / sy;
        let q = 1.0 - r * r;
        let z = zx * zx + zy * zy - 2.0 * r * zx * zy;
        (-z / (2.0 * q)).exp() / (2.0 * PI * sx * sy * q.sqrt())
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        (0..self.components()).map(|j| self.pi[j] * self.component_density(j, x, y)).sum()
    }

    /// `−log p(Δ) − log p(pen)`, with the offset density floored to stay finite.
    pub fn nll(&self, dx: f64, dy: f64, pen: usize) -> f64 {
        -self.density(dx, dy).max(f64::MIN_POSITIVE).ln() - self.pen[pen].max(f64::MIN_POSITIVE).ln()
    }

    /// Samples an offset and pen state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, usize) {
        let j = categorical(&self.pi, rng);
        let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        let r = self.rho[j];
        let dx = self.mu_x[j] + self.sigma_x[j] * a;
        let dy = self.mu_y[j] + self.sigma_y[j] * (r * a + (1.0 - r * r).sqrt() * b);
        (dx, dy, categorical(&self.pen, rng))
    }

    /// Mean of the most probable component and the most probable pen state.
    pub fn mode(&self) -> (f64, f64, usize) {
        let j = argmax(&self.pi);
        (self.mu_x[j], self.mu_y[j], argmax(&self.pen))
    }
}

pub(crate) fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
