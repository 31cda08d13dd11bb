use std::f64::consts::PI;

use autodiff::{Linear, Module, Param, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Diagonal Gaussian policy `a = μ + ξ ⊙ Σ`, `ξ ~ N(0, I)`.
///
/// `Σ` holds per-dimension standard deviations stored as `exp(log σ)`; the
/// log-density is that of the sampling distribution, variance `Σ²`.
#[derive(Debug, Clone)]
pub struct GaussianPolicyHead {
    pub mu: Linear,
    pub log_sigma: Param,
}

impl GaussianPolicyHead {
    /// A head whose mean map starts as a copy of `g_φ`.
    pub fn from_projection(name: &str, g_phi: &Linear) -> Self {
        let mut mu = g_phi.clone();
        mu.w = Param::new(format!("{name}.mu.w"), g_phi.w.value.clone());
        mu.b = Param::new(format!("{name}.mu.b"), g_phi.b.value.clone());
        let d = g_phi.fan_out();
        Self {
            mu,
            log_sigma: Param::new(format!("{name}.log_sigma"), Tensor::zeros(1, d)),
        }
    }

    pub fn new<R: Rng + ?Sized>(name: &str, state_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            mu: Linear::new(&format!("{name}.mu"), state_dim, dim, rng),
            log_sigma: Param::new(format!("{name}.log_sigma"), Tensor::zeros(1, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.fan_out()
    }

    pub fn mean<'t>(&self, tape: &'t Tape, state: Var<'t>) -> Var<'t> {
        self.mu.forward(tape, state)
    }

    pub fn mean_plain(&self, state: &[f64]) -> Vec<f64> {
        self.mu.apply(&Tensor::row(state)).into_data()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.value.data().iter().map(|v| v.exp()).collect()
    }

    /// Log-density of `action` rows under the policy at `mean` rows.
    pub fn log_prob<'t>(&self, tape: &'t Tape, mean: Var<'t>, action: &Tensor) -> Var<'t> {
        let ls = tape.param(&self.log_sigma);
        let z = tape.constant(action.clone()).sub(mean).div(ls.exp());
        let d = action.cols() as f64;
        z.square()
            .scale(-0.5)
            .sub(ls)
            .sum_cols()
            .add_scalar(-0.5 * d * (2.0 * PI).ln())
    }
}

impl Module for GaussianPolicyHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.mu.w, &self.mu.b, &self.log_sigma]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.mu.w, &mut self.mu.b, &mut self.log_sigma]
    }
}

/// Plain log-density of a diagonal Gaussian with standard deviations `sigma`.
pub fn gaussian_log_prob(action: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    action
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Draws `a = μ + ξ ⊙ σ` and returns it with its log-density.
pub fn policy_sample<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let a: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let xi: f64 = StandardNormal.sample(rng);
            m + xi * s
        })
        .collect();
    let lp = gaussian_log_prob(&a, mu, sigma);
    (a, lp)
}
