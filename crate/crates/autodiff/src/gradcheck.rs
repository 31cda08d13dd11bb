//! Finite-difference verification of analytic gradients.
//!
//! Numeric derivatives use the five-point stencil with step [`STEP`]. Inputs
//! that land near a kink or pole (as reported by the tape) are excluded rather
//! than scored.

use crate::error::{AutodiffError, Result};
use crate::param::Module;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum GradCheck {
    Checked { max_rel_error: f64 },
    Excluded { region: &'static str },
}

impl GradCheck {
    pub fn max_error(&self) -> Option<f64> {
        match self {
            Self::Checked { max_rel_error } => Some(*max_rel_error),
            Self::Excluded { .. } => None,
        }
    }

    pub fn is_excluded(&self) -> bool {
        matches!(self, Self::Excluded { .. })
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn stencil(mut eval: impl FnMut(f64) -> Result<std::result::Result<f64, &'static str>>) -> Result<std::result::Result<f64, &'static str>> {
    let mut f = [0.0; 4];
    for (k, d) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
        match eval(d * STEP)? {
            Ok(v) => f[k] = v,
            Err(region) => return Ok(Err(region)),
        }
    }
    Ok(Ok(((f[3] - f[0]) + 8.0 * (f[1] - f[2])) / (12.0 * STEP)))
}

fn scalar_of(tape: &Tape, loss: Var<'_>) -> Result<std::result::Result<f64, &'static str>> {
    let shape = loss.shape();
    if shape != [1, 1] {
        return Err(AutodiffError::NonScalarLoss(shape));
    }
    Ok(match tape.singular_region() {
        Some(region) => Err(region),
        None => Ok(loss.item()),
    })
}

/// Compares the gradient of `f` with respect to every entry of `inputs`
/// against finite differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, &vars);
    if let Err(region) = scalar_of(&tape, loss)? {
        return Ok(GradCheck::Excluded { region });
    }
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        for j in 0..x.len() {
            let numeric = stencil(|d| {
                let t = Tape::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, inp)| {
                        let mut v = inp.clone();
                        if k == i {
                            v.data_mut()[j] += d;
                        }
                        t.input(v)
                    })
                    .collect();
                let l = f(&t, &vs);
                scalar_of(&t, l)
            })?;
            match numeric {
                Ok(n) => worst = worst.max(rel_error(analytic.data()[j], n)),
                Err(region) => return Ok(GradCheck::Excluded { region }),
            }
        }
    }
    Ok(GradCheck::Checked { max_rel_error: worst })
}

/// Checks the gradient of a scalar loss with respect to every parameter of
/// `model`. Parameter values are restored afterwards.
pub fn grad_check_module<M, F>(model: &mut M, f: F) -> Result<GradCheck>
where
    M: Module,
    F: for<'t> Fn(&M, &'t Tape) -> Var<'t>,
{
    grad_check_module_strided(model, f, 1)
}

/// Like [`grad_check_module`] but only probes every `stride`-th entry of each
/// parameter, for models too large to probe exhaustively.
pub fn grad_check_module_strided<M, F>(model: &mut M, f: F, stride: usize) -> Result<GradCheck>
where
    M: Module,
    F: for<'t> Fn(&M, &'t Tape) -> Var<'t>,
{
    let stride = stride.max(1);
    let tape = Tape::new();
    let loss = f(model, &tape);
    if let Err(region) = scalar_of(&tape, loss)? {
        return Ok(GradCheck::Excluded { region });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            grads.param(p.id()).unwrap_or_else(|| {
                let [r, c] = p.shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();
    let mut worst = 0.0f64;
    for (pi, a) in analytic.iter().enumerate() {
        for j in (0..a.len()).step_by(stride) {
            let numeric = stencil(|d| {
                let orig = model.params()[pi].value.data()[j];
                model.params_mut()[pi].value.data_mut()[j] = orig + d;
                let t = Tape::new();
                let l = f(model, &t);
                let out = scalar_of(&t, l);
                model.params_mut()[pi].value.data_mut()[j] = orig;
                out
            })?;
            match numeric {
                Ok(n) => worst = worst.max(rel_error(a.data()[j], n)),
                Err(region) => return Ok(GradCheck::Excluded { region }),
            }
        }
    }
    Ok(GradCheck::Checked { max_rel_error: worst })
}
