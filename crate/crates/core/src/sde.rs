//! The variance-preserving forward SDE `dx = -½β(l)x dl + √β(l) dw` on
//! diffusion time `l ∈ [0, 1]`, with its Gaussian transition kernel and the
//! drifts of the reverse SDE and probability-flow ODE.
//!
//! Tensors are flat `f64` slices; every operation is element-wise.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Noise schedule family. Only VP is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Vp,
}

/// Linear-β VP schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Lower integration limit used in place of `l = 0`.
    pub t_eps: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Vp,
            beta_min: 0.1,
            beta_max: 20.0,
            t_eps: 1e-5,
        }
    }
}

/// Moments of `p(x^l | x^0) = N(mean_coeff · x^0, std² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMoments {
    pub mean_coeff: f64,
    pub std: f64,
}

impl SdeSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_eps: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < β_min < β_max, got {beta_min}, {beta_max}"
            )));
        }
        if !(t_eps > 0.0 && t_eps <= 0.01) {
            return Err(Error::InvalidArgument(format!("t_eps {t_eps} outside (0, 0.01]")));
        }
        Ok(Self {
            kind: ScheduleKind::Vp,
            beta_min,
            beta_max,
            t_eps,
        })
    }

    fn check(l: f64) -> Result<()> {
        if (0.0..=1.0).contains(&l) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange(l))
        }
    }

    /// `β(l)`; no range check.
    #[inline]
    pub fn beta(&self, l: f64) -> f64 {
        self.beta_min + l * (self.beta_max - self.beta_min)
    }

    /// `B(l) = ∫₀ˡ β(s) ds`.
    #[inline]
    pub fn integrated_beta(&self, l: f64) -> f64 {
        self.beta_min * l + 0.5 * l * l * (self.beta_max - self.beta_min)
    }

    /// `f(x, l) = -½β(l)x`.
    pub fn drift(&self, x: &[f64], l: f64) -> Result<Vec<f64>> {
        Self::check(l)?;
        let c = -0.5 * self.beta(l);
        Ok(x.iter().map(|v| c * v).collect())
    }

    /// `g(l) = √β(l)`.
    pub fn diffusion(&self, l: f64) -> Result<f64> {
        Self::check(l)?;
        Ok(self.beta(l).sqrt())
    }

    pub fn transition_moments(&self, l: f64) -> Result<TransitionMoments> {
        Self::check(l)?;
        Ok(self.moments(l))
    }

    /// Unchecked closed-form moments.
    #[inline]
    pub fn moments(&self, l: f64) -> TransitionMoments {
        let b = self.integrated_beta(l);
        TransitionMoments {
            mean_coeff: (-0.5 * b).exp(),
            // -expm1(-b) keeps precision for tiny b
            std: (-(-b).exp_m1()).sqrt(),
        }
    }

    /// Samples `x^l` from `x^0` with the given standard-normal `noise` and
    /// returns it together with the denoising target `∇ log p(x^l | x^0) = -noise / std`.
    pub fn perturb(&self, x0: &[f64], l: f64, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x0.len() != noise.len() {
            return Err(shape(x0.len(), noise.len()));
        }
        Self::check(l)?;
        if l <= 0.0 {
            return Err(Error::InvalidArgument(
                "perturbation at l = 0 has no defined score target".into(),
            ));
        }
        let TransitionMoments { mean_coeff, std } = self.moments(l);
        let xl = x0
            .iter()
            .zip(noise)
            .map(|(a, n)| mean_coeff * a + std * n)
            .collect();
        let target = noise.iter().map(|n| -n / std).collect();
        Ok((xl, target))
    }

    /// Reverse-SDE drift `f - g² · score`.
    pub fn reverse_drift(&self, x: &[f64], l: f64, score: &[f64]) -> Result<Vec<f64>> {
        self.combined_drift(x, l, score, 1.0)
    }

    /// Probability-flow drift `f - ½g² · score`.
    pub fn pf_ode_drift(&self, x: &[f64], l: f64, score: &[f64]) -> Result<Vec<f64>> {
        self.combined_drift(x, l, score, 0.5)
    }

    fn combined_drift(&self, x: &[f64], l: f64, score: &[f64], weight: f64) -> Result<Vec<f64>> {
        if x.len() != score.len() {
            return Err(shape(x.len(), score.len()));
        }
        Self::check(l)?;
        let beta = self.beta(l);
        Ok(x.iter()
            .zip(score)
            .map(|(xi, si)| -0.5 * beta * xi - weight * beta * si)
            .collect())
    }
}

fn shape(expected: usize, got: usize) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected} elements"),
        got: format!("{got}"),
    }
}

/// Log-density of the standard normal prior.
pub fn prior_logpdf(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    -0.5 * n * (2.0 * PI).ln() - 0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

/// `n` standard-normal draws.
pub fn prior_sample(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Simulates the forward SDE from `x0` with Euler–Maruyama, returning the
/// states at each time in `report_at` (ascending).
pub fn euler_maruyama_forward(
    schedule: &SdeSchedule,
    x0: &[f64],
    n_steps: usize,
    report_at: &[f64],
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    let dl = 1.0 / n_steps as f64;
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(report_at.len());
    let mut next = 0;
    for k in 0..n_steps {
        let l = k as f64 * dl;
        let beta = schedule.beta(l);
        let g = (beta * dl).sqrt();
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += -0.5 * beta * *v * dl + g * z;
        }
        let l_new = (k + 1) as f64 * dl;
        while next < report_at.len() && report_at[next] <= l_new + 1e-12 {
            out.push(x.clone());
            next += 1;
        }
    }
    out
}
