//! Probability-flow ODE and reverse-SDE sampling, divergence estimation and
//! exact log-likelihood through the augmented ODE.
//!
//! Windows are flat row-major `(ω+1) x m` slices. A condition is an `ω x m`
//! slice, or `None` for the zero condition.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ScoreNetwork;
use crate::ode::{self, SolverConfig};
use crate::rng::{self, Rng, Stream};
use crate::sde::{prior_logpdf, prior_sample};

/// Default number of Euler–Maruyama steps for reverse-SDE sampling.
pub const REVERSE_SDE_STEPS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    /// One directional derivative per coordinate.
    #[default]
    Exact,
    /// Rademacher probes, fixed for the whole solve.
    Hutchinson { n_probes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceEstimator {
    pub mode: TraceMode,
    pub seed: u64,
}

impl TraceEstimator {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn hutchinson(n_probes: usize, seed: u64) -> Self {
        Self {
            mode: TraceMode::Hutchinson { n_probes },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TraceMode::Hutchinson { n_probes: 0 } = self.mode {
            return Err(Error::InvalidArgument("n_probes must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Probe directions for a `dim`-dimensional field.
    pub fn directions(&self, dim: usize) -> Vec<Vec<f64>> {
        match self.mode {
            TraceMode::Exact => (0..dim)
                .map(|i| {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    e
                })
                .collect(),
            TraceMode::Hutchinson { n_probes } => {
                let mut rng = rng::substream(self.seed, Stream::Probes, dim as u64);
                rademacher(n_probes, dim, &mut rng)
            }
        }
    }
}

/// `count` Rademacher vectors of length `dim`.
pub fn rademacher(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

/// Score-network evaluations consumed by one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeRecord {
    pub count: usize,
}

/// `tr(J)` from Jacobian-vector products. `jvp` receives all directions at
/// once and returns `J v` for each; the result averages `vᵀ J v`, which is
/// the exact trace for unit directions scaled by `dim`.
pub fn divergence<J>(dim: usize, estimator: &TraceEstimator, mut jvp: J) -> f64
where
    J: FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
{
    let dirs = estimator.directions(dim);
    let products = jvp(&dirs);
    let quad: f64 = dirs
        .iter()
        .zip(&products)
        .map(|(v, jv)| v.iter().zip(jv).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    match estimator.mode {
        TraceMode::Exact => quad,
        TraceMode::Hutchinson { .. } => quad / dirs.len() as f64,
    }
}

fn check_window(net: &ScoreNetwork, x: &[f64], condition: Option<&[f64]>) -> Result<()> {
    let c = net.config();
    if x.len() != c.window_numel() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} window elements", c.window_numel()),
            got: format!("{}", x.len()),
        });
    }
    if let Some(cond) = condition {
        if cond.len() != c.omega * c.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} condition elements", c.omega * c.dim),
                got: format!("{}", cond.len()),
            });
        }
    }
    Ok(())
}

/// PF-ODE drift `f - ½ g² S` written into `out`.
fn pf_rhs(net: &ScoreNetwork, condition: Option<&[f64]>, l: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    let s = net.forward_batch(x, &[condition], &[l.clamp(0.0, 1.0)])?;
    let half_beta = 0.5 * net.schedule().beta(l);
    for ((o, xi), si) in out.iter_mut().zip(x).zip(&s) {
        *o = -half_beta * (xi + si);
    }
    Ok(())
}

/// Transports `x` along the PF-ODE from `from` to `to`.
pub fn integrate_pf_ode(
    net: &ScoreNetwork,
    x: &[f64],
    condition: Option<&[f64]>,
    from: f64,
    to: f64,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, NfeRecord)> {
    check_window(net, x, condition)?;
    let (y, stats) = ode::solve(|l, y, out| pf_rhs(net, condition, l, y, out), from, to, x, solver)?;
    Ok((y, NfeRecord { count: stats.nfe }))
}

/// Draws `x(1)` from the prior and integrates the PF-ODE down to `t_eps`.
pub fn sample_pf_ode(
    net: &ScoreNetwork,
    condition: Option<&[f64]>,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, NfeRecord)> {
    let mut rng = rng::stream(seed, Stream::Sampling);
    let x1 = prior_sample(net.config().window_numel(), &mut rng);
    integrate_pf_ode(net, &x1, condition, 1.0, net.schedule().t_eps, solver)
}

/// Euler–Maruyama on the reverse SDE from `l = 1` to `t_eps`.
pub fn sample_reverse_sde(
    net: &ScoreNetwork,
    condition: Option<&[f64]>,
    seed: u64,
    n_steps: usize,
) -> Result<(Vec<f64>, NfeRecord)> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be ≥ 1".into()));
    }
    let n = net.config().window_numel();
    let mut rng = rng::stream(seed, Stream::Sampling);
    let mut x = prior_sample(n, &mut rng);
    check_window(net, &x, condition)?;
    let sched = net.schedule();
    let dl = (1.0 - sched.t_eps) / n_steps as f64;
    for k in 0..n_steps {
        let l = 1.0 - k as f64 * dl;
        let s = net.forward_batch(&x, &[condition], &[l])?;
        let beta = sched.beta(l);
        let g = (beta * dl).sqrt();
        for (xi, si) in x.iter_mut().zip(&s) {
            let z: f64 = StandardNormal.sample(&mut rng);
            // x ← x - (f - g² S) dl + g √dl z
            *xi += (0.5 * beta * *xi + beta * si) * dl + g * z;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reverse-SDE state at l = {l}")));
        }
    }
    Ok((x, NfeRecord { count: n_steps }))
}

/// Divergence of the PF-ODE drift at `(x, l)`:
/// `-½β(l) n - ½β(l) tr(∂S/∂x)`.
pub fn pf_ode_divergence(
    net: &ScoreNetwork,
    x: &[f64],
    condition: Option<&[f64]>,
    l: f64,
    directions: &[Vec<f64>],
    exact: bool,
) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let pass = net.trace(x, &[condition], &[l.clamp(0.0, 1.0)])?;
    let k = directions.len();
    let mut tangents = Vec::with_capacity(k * n);
    for d in directions {
        tangents.extend_from_slice(d);
    }
    let jv = pass.jvp(&tangents, k);
    let mut quad = 0.0;
    for (j, d) in directions.iter().enumerate() {
        quad += d.iter().zip(&jv[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
    }
    let tr = if exact { quad } else { quad / k as f64 };
    let half_beta = 0.5 * net.schedule().beta(l);
    let drift: Vec<f64> = x.iter().zip(pass.scores()).map(|(xi, si)| -half_beta * (xi + si)).collect();
    Ok((drift, -half_beta * (n as f64 + tr)))
}

/// `log p(x⁰ | condition)` in nats: integrates the state and the log-density
/// increment from `t_eps` to 1 and adds the prior log-density of `x(1)`.
pub fn log_likelihood(
    net: &ScoreNetwork,
    x: &[f64],
    condition: Option<&[f64]>,
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<(f64, NfeRecord)> {
    check_window(net, x, condition)?;
    estimator.validate()?;
    let n = x.len();
    let dirs = estimator.directions(n);
    let exact = matches!(estimator.mode, TraceMode::Exact);
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let rhs = |l: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let (drift, div) = pf_ode_divergence(net, &y[..n], condition, l, &dirs, exact)?;
        out[..n].copy_from_slice(&drift);
        out[n] = div;
        Ok(())
    };
    let (y1, stats) = ode::solve(rhs, net.schedule().t_eps, 1.0, &y0, solver)?;
    Ok((prior_logpdf(&y1[..n]) + y1[n], NfeRecord { count: stats.nfe }))
}

/// Per-coordinate split of the exact-trace log-likelihood: entry `i` is
/// `log N(x_i(1); 0, 1) + ∫ ∂f̃_i/∂x_i dl`. The entries sum to the joint
/// log-likelihood; for a separable field each is the marginal log-density.
pub fn log_likelihood_terms(
    net: &ScoreNetwork,
    x: &[f64],
    condition: Option<&[f64]>,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, NfeRecord)> {
    check_window(net, x, condition)?;
    let n = x.len();
    let dirs = TraceEstimator::exact().directions(n);
    let mut y0 = x.to_vec();
    y0.resize(2 * n, 0.0);
    let rhs = |l: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let pass = net.trace(&y[..n], &[condition], &[l.clamp(0.0, 1.0)])?;
        let tangents: Vec<f64> = dirs.iter().flatten().copied().collect();
        let jv = pass.jvp(&tangents, n);
        let half_beta = 0.5 * net.schedule().beta(l);
        for i in 0..n {
            out[i] = -half_beta * (y[i] + pass.scores()[i]);
            out[n + i] = -half_beta * (1.0 + jv[i * n + i]);
        }
        Ok(())
    };
    let (y1, stats) = ode::solve(rhs, net.schedule().t_eps, 1.0, &y0, solver)?;
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let terms = (0..n).map(|i| c - 0.5 * y1[i] * y1[i] + y1[n + i]).collect();
    Ok((terms, NfeRecord { count: stats.nfe }))
}

/// Perturbs `xbar` to `l = tau` in closed form and runs the zero-condition
/// PF-ODE back to `t_eps`. `tau = 0` returns the input untouched.
pub fn partial_diffuse_denoise(
    net: &ScoreNetwork,
    xbar: &[f64],
    tau: f64,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, NfeRecord)> {
    check_window(net, xbar, None)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::TimeOutOfRange(tau));
    }
    if tau == 0.0 {
        return Ok((xbar.to_vec(), NfeRecord::default()));
    }
    let mut rng = rng::stream(seed, Stream::Purification);
    let noise = prior_sample(xbar.len(), &mut rng);
    let (x_tau, _) = net.schedule().perturb(xbar, tau, &noise)?;
    let t_eps = net.schedule().t_eps;
    if tau <= t_eps {
        return Ok((x_tau, NfeRecord::default()));
    }
    integrate_pf_ode(net, &x_tau, None, tau, t_eps, solver)
}
