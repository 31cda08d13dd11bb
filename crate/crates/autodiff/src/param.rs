use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor together with its accumulated gradient.
///
/// Cloning a parameter yields a new identity, so a frozen snapshot never
/// aliases the live copy on a shared tape.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let [r, c] = value.shape();
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds this parameter's gradient from `grads`, if it was reached.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.param(self.id) {
            self.grad.add_assign(&g);
        }
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_value",
                left: self.shape(),
                right: value.shape(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// Anything owning an ordered list of parameters.
///
/// The order returned by `params` and `params_mut` must agree; checkpoints
/// and `copy_from` rely on it.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn accumulate(&mut self, grads: &Gradients) {
        for p in self.params_mut() {
            p.accumulate(grads);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites parameter values with those of `other` (same architecture).
    fn copy_from(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src: Vec<Tensor> = other.params().iter().map(|p| p.value.clone()).collect();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "copy_from: {} parameters vs {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.set_value(s)?;
        }
        Ok(())
    }

    /// Global l2 norm of all accumulated gradients.
    fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
