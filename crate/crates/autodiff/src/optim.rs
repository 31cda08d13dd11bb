use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::param::{Module, Param, ParamId};
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update using each parameter's accumulated `grad`.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        for p in &params {
            if p.grad.shape() != p.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    left: p.shape(),
                    right: p.grad.shape(),
                });
            }
            if let Some((m, _)) = self.moments.get(&p.id()) {
                if m.shape() != p.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam",
                        left: m.shape(),
                        right: p.shape(),
                    });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            let [r, c] = p.shape();
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(r, c), Tensor::zeros(r, c)));
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_module<M: Module + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.step(model.params_mut())
    }
}

/// Rescales gradients so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: Vec<&mut Param>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for p in params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Param::new("w", Tensor::row(&[0.3, -1.2]));
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.3, -1.2]);
        assert_eq!(opt.t(), 1);
    }

    #[test]
    fn first_step_magnitude() {
        let mut p = Param::new("w", Tensor::scalar(0.0));
        p.grad = Tensor::scalar(1.0);
        let mut opt = Adam::with_betas(0.1, 0.9, 0.999, 1e-8);
        opt.step(vec![&mut p]).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Param::new("w", Tensor::row(&[0.0, 0.0]));
        p.grad = Tensor::scalar(1.0);
        assert!(Adam::new(0.1).step(vec![&mut p]).is_err());
    }
}
