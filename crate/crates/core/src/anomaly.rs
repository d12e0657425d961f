//! Calibrated anomaly measurements with condition purification, their
//! multiplicative combinations and thresholding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{window_at, window_count, TimeSeries, Window};
use crate::error::{Error, Result};
use crate::nn::ScoreNetwork;
use crate::ode::SolverConfig;
use crate::rng::{self, Stream};
use crate::sampler::{self, NfeRecord, TraceEstimator};

/// Purification depths accepted by [`DetectorConfig`].
pub const TAU_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

/// Which measurements enter the product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Combination {
    R,
    P,
    G,
    RP,
    RG,
    PG,
    #[default]
    RPG,
}

impl Combination {
    pub const ALL: [Combination; 7] = [
        Combination::R,
        Combination::P,
        Combination::G,
        Combination::RP,
        Combination::RG,
        Combination::PG,
        Combination::RPG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Combination::R => "R",
            Combination::P => "P",
            Combination::G => "G",
            Combination::RP => "RP",
            Combination::RG => "RG",
            Combination::PG => "PG",
            Combination::RPG => "RPG",
        }
    }

    pub fn uses_recon(self) -> bool {
        self.name().contains('R')
    }

    pub fn uses_prob(self) -> bool {
        self.name().contains('P')
    }

    pub fn uses_grad(self) -> bool {
        self.name().contains('G')
    }

    fn is_product(self) -> bool {
        self.name().len() > 1
    }
}

impl std::str::FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Combination::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown combination mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub tau: f64,
    pub combination: Combination,
    /// Threshold δ on the combined score.
    pub threshold: f64,
    pub solver: SolverConfig,
    pub estimator: TraceEstimator,
    pub seed: u64,
    /// Worker threads for window fan-out; 0 uses the global pool.
    pub workers: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            combination: Combination::RPG,
            threshold: f64::INFINITY,
            solver: SolverConfig::default(),
            estimator: TraceEstimator::exact(),
            seed: 0,
            workers: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !TAU_GRID.iter().any(|&t| (t - self.tau).abs() < 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "tau {} is not one of {TAU_GRID:?}",
                self.tau
            )));
        }
        if self.threshold.is_nan() {
            return Err(Error::InvalidArgument("threshold is NaN".into()));
        }
        self.solver.validate()?;
        self.estimator.validate()
    }
}

/// Network evaluations spent on one window, per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WindowNfe {
    pub purify: usize,
    pub recon: usize,
    pub prob: usize,
    pub grad: usize,
}

impl WindowNfe {
    pub fn total(&self) -> usize {
        self.purify + self.recon + self.prob + self.grad
    }
}

/// The three raw measurements of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub end_index: usize,
    pub recon: f64,
    pub prob: f64,
    pub grad: f64,
    pub nfe: WindowNfe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySeries {
    pub tau: f64,
    pub combination: Combination,
    pub threshold: f64,
    /// 1-based end index `t` of each scored window.
    pub end_index: Vec<usize>,
    pub recon: Vec<f64>,
    pub prob: Vec<f64>,
    pub grad: Vec<f64>,
    pub combined: Vec<f64>,
    pub predicted: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    pub nfe: Vec<WindowNfe>,
}

impl AnomalySeries {
    pub fn len(&self) -> usize {
        self.end_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.end_index.is_empty()
    }

    /// Re-combines the stored measurements under another mode and threshold.
    pub fn recombined(&self, combination: Combination, threshold: f64) -> AnomalySeries {
        let combined = combine_series(&self.recon, &self.prob, &self.grad, combination);
        let predicted = apply_threshold(&combined, threshold);
        AnomalySeries {
            combination,
            threshold,
            combined,
            predicted,
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        for c in comments {
            writeln!(w, "# {c}").map_err(io)?;
        }
        writeln!(w, "# tau={} combination={} threshold={}", self.tau, self.combination.name(), self.threshold)
            .map_err(io)?;
        let has_labels = self.labels.is_some();
        write!(w, "t,recon,prob,grad,combined,predicted").map_err(io)?;
        if has_labels {
            write!(w, ",label").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for i in 0..self.len() {
            write!(
                w,
                "{},{:e},{:e},{:e},{:e},{}",
                self.end_index[i], self.recon[i], self.prob[i], self.grad[i], self.combined[i], self.predicted[i]
            )
            .map_err(io)?;
            if let Some(labels) = &self.labels {
                write!(w, ",{}", labels[i]).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn write_nfe_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        for c in comments {
            writeln!(w, "# {c}").map_err(io)?;
        }
        writeln!(w, "t,purify,recon,prob,grad,total").map_err(io)?;
        for (t, n) in self.end_index.iter().zip(&self.nfe) {
            writeln!(w, "{t},{},{},{},{},{}", n.purify, n.recon, n.prob, n.grad, n.total()).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Seed for one window, derived from the detector seed and the end index.
pub fn window_seed(seed: u64, stream: Stream, end_index: usize) -> u64 {
    rng::substream(seed, stream, end_index as u64).next_u64()
}

/// Appends a zero row to a flat `ω x m` condition.
fn pad_zero_row(condition: &[f64], dim: usize) -> Vec<f64> {
    let mut x = condition.to_vec();
    x.resize(condition.len() + dim, 0.0);
    x
}

/// Purified condition `x̃`: the zero-padded condition is partially diffused
/// to `tau` and denoised with the zero-condition score.
pub fn purify(
    net: &ScoreNetwork,
    condition: &[f64],
    tau: f64,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, NfeRecord)> {
    let dim = net.config().dim;
    let xbar = pad_zero_row(condition, dim);
    let (mut out, nfe) = sampler::partial_diffuse_denoise(net, &xbar, tau, seed, solver)?;
    out.truncate(condition.len());
    Ok((out, nfe))
}

/// Squared Euclidean distance.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `‖x̂_t - x_t‖²` for a window generated under the purified condition.
pub fn a_recon(
    net: &ScoreNetwork,
    window: &[f64],
    purified: &[f64],
    seed: u64,
    solver: &SolverConfig,
) -> Result<(f64, NfeRecord)> {
    let (generated, nfe) = sampler::sample_pf_ode(net, Some(purified), seed, solver)?;
    let last = window.len() - net.config().dim;
    Ok((squared_distance(&generated[last..], &window[last..]), nfe))
}

/// Negative conditional log-density of the whole window.
pub fn a_prob(
    net: &ScoreNetwork,
    window: &[f64],
    purified: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<(f64, NfeRecord)> {
    let (ll, nfe) = sampler::log_likelihood(net, window, Some(purified), solver, estimator)?;
    Ok((-ll, nfe))
}

/// ℓ1 norm of the conditional score at `l = t_eps`.
pub fn a_grad(net: &ScoreNetwork, window: &[f64], purified: &[f64]) -> Result<(f64, NfeRecord)> {
    let s = net.forward_batch(window, &[Some(purified)], &[net.schedule().t_eps])?;
    Ok((l1_norm(&s), NfeRecord { count: 1 }))
}

/// Product of the selected measurements; singletons return the raw value.
pub fn combine(recon: f64, prob: f64, grad: f64, mode: Combination) -> f64 {
    let mut out = 1.0;
    if mode.uses_recon() {
        out *= recon;
    }
    if mode.uses_prob() {
        out *= prob;
    }
    if mode.uses_grad() {
        out *= grad;
    }
    out
}

/// Combined score for a whole series. In product modes the probability
/// measurement is shifted by its series minimum so every factor is ≥ 0.
pub fn combine_series(recon: &[f64], prob: &[f64], grad: &[f64], mode: Combination) -> Vec<f64> {
    let shift = if mode.uses_prob() && mode.is_product() {
        prob.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    (0..recon.len())
        .map(|i| combine(recon[i], prob[i] - shift, grad[i], mode))
        .collect()
}

/// `ŷ = 1` iff the score exceeds `threshold`.
pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Linear-interpolated percentile (`pct` in [0, 100]).
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("percentile {pct} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Purifies the condition of `window` and computes all three measurements.
pub fn measure_window(net: &ScoreNetwork, window: &Window, config: &DetectorConfig) -> Result<Measurement> {
    let x: Vec<f64> = window.target.iter().copied().collect();
    let cond: Vec<f64> = window.condition.iter().copied().collect();
    let t = window.end_index;
    let (purified, np) = purify(net, &cond, config.tau, window_seed(config.seed, Stream::Purification, t), &config.solver)?;
    let (recon, nr) = a_recon(net, &x, &purified, window_seed(config.seed, Stream::Sampling, t), &config.solver)?;
    let (prob, nl) = a_prob(net, &x, &purified, &config.solver, &config.estimator)?;
    let (grad, ng) = a_grad(net, &x, &purified)?;
    Ok(Measurement {
        end_index: t,
        recon,
        prob,
        grad,
        nfe: WindowNfe {
            purify: np.count,
            recon: nr.count,
            prob: nl.count,
            grad: ng.count,
        },
    })
}

/// Measures the windows starting at `starts` (0-based), fanned out over
/// `config.workers` threads. Output is in the order of `starts`.
pub fn measure_windows(
    net: &ScoreNetwork,
    series: &TimeSeries,
    starts: &[usize],
    config: &DetectorConfig,
) -> Result<Vec<Measurement>> {
    config.validate()?;
    let omega = net.config().omega;
    if series.dim() != net.config().dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", net.config().dim),
            got: format!("{}", series.dim()),
        });
    }
    let n = window_count(series.len(), omega);
    if let Some(&bad) = starts.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidArgument(format!("window start {bad} beyond the last window {n}")));
    }
    let run = || {
        starts
            .par_iter()
            .map(|&s| measure_window(net, &window_at(series, omega, s), config))
            .collect::<Result<Vec<_>>>()
    };
    if config.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)
    }
}

/// Scores every window of `series`.
pub fn score_series(net: &ScoreNetwork, series: &TimeSeries, config: &DetectorConfig) -> Result<AnomalySeries> {
    let omega = net.config().omega;
    if series.len() < omega + 1 {
        return Err(Error::InvalidArgument(format!(
            "series of length {} is shorter than one window (ω + 1 = {})",
            series.len(),
            omega + 1
        )));
    }
    let starts: Vec<usize> = (0..window_count(series.len(), omega)).collect();
    let m = measure_windows(net, series, &starts, config)?;
    Ok(assemble(&m, series.labels(), config))
}

/// Builds an [`AnomalySeries`] from per-window measurements. `labels` is the
/// full-length label vector of the scored series.
pub fn assemble(measurements: &[Measurement], labels: Option<&[u8]>, config: &DetectorConfig) -> AnomalySeries {
    let end_index: Vec<usize> = measurements.iter().map(|m| m.end_index).collect();
    let recon: Vec<f64> = measurements.iter().map(|m| m.recon).collect();
    let prob: Vec<f64> = measurements.iter().map(|m| m.prob).collect();
    let grad: Vec<f64> = measurements.iter().map(|m| m.grad).collect();
    let combined = combine_series(&recon, &prob, &grad, config.combination);
    let predicted = apply_threshold(&combined, config.threshold);
    AnomalySeries {
        tau: config.tau,
        combination: config.combination,
        threshold: config.threshold,
        labels: labels.map(|l| end_index.iter().map(|&t| l[t - 1]).collect()),
        nfe: measurements.iter().map(|m| m.nfe).collect(),
        end_index,
        recon,
        prob,
        grad,
        combined,
        predicted,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    /// `‖∇ log p‖₂` at the window.
    pub score_norm: f64,
    /// `|log p(x + ε) - log p(x)| / ‖ε‖₂`, 0 when `ε = 0`.
    pub ratio: f64,
    pub eps_norm: f64,
    /// Set when `ratio` exceeds `score_norm` by more than the second-order
    /// allowance `tolerance`.
    pub flagged: bool,
}

/// Compares a score with a finite difference of log-densities along `eps`.
/// `tolerance` absorbs the second-order Taylor term.
pub fn consistency_from(score: &[f64], logp: f64, logp_perturbed: f64, eps: &[f64], tolerance: f64) -> ConsistencyReport {
    let score_norm = score.iter().map(|s| s * s).sum::<f64>().sqrt();
    let eps_norm = eps.iter().map(|s| s * s).sum::<f64>().sqrt();
    let ratio = if eps_norm == 0.0 {
        0.0
    } else {
        (logp_perturbed - logp).abs() / eps_norm
    };
    ConsistencyReport {
        score_norm,
        ratio,
        eps_norm,
        flagged: ratio > score_norm + tolerance,
    }
}

/// Checks `‖∇ log p‖₂ ≥ |Δ log p| / ‖ε‖₂` for the trained network with a
/// Gaussian perturbation of scale `eps_scale`. The allowance is `eps_norm`
/// plus the solver tolerance relative to `eps_norm`. Diagnostic only.
pub fn score_log_consistency_check(
    net: &ScoreNetwork,
    window: &[f64],
    purified: &[f64],
    eps_scale: f64,
    seed: u64,
    solver: &SolverConfig,
) -> Result<ConsistencyReport> {
    let mut rng = rng::stream(seed, Stream::Evaluation);
    let eps: Vec<f64> = (0..window.len())
        .map(|_| eps_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let estimator = TraceEstimator::exact();
    let (logp, _) = sampler::log_likelihood(net, window, Some(purified), solver, &estimator)?;
    let shifted: Vec<f64> = window.iter().zip(&eps).map(|(a, b)| a + b).collect();
    let (logp_eps, _) = sampler::log_likelihood(net, &shifted, Some(purified), solver, &estimator)?;
    let score = net.forward_batch(window, &[Some(purified)], &[net.schedule().t_eps])?;
    let eps_norm = eps.iter().map(|s| s * s).sum::<f64>().sqrt();
    let tolerance = if eps_norm > 0.0 { eps_norm + solver.atol / eps_norm } else { 0.0 };
    Ok(consistency_from(&score, logp, logp_eps, &eps, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ScoreNetConfig;
    use crate::sde::SdeSchedule;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn tiny_net() -> ScoreNetwork {
        let cfg = ScoreNetConfig {
            channel_width: 8,
            time_embed_dim: 8,
            n_layer: 2,
            n_resnet: 1,
            seed: 5,
            ..ScoreNetConfig::new(4, 2)
        };
        let mut net = ScoreNetwork::init(cfg, SdeSchedule::default()).unwrap();
        // non-zero output layer so the score is not identically zero
        for (i, v) in net.params_mut().flat_mut().iter_mut().enumerate() {
            *v += 0.02 * (i as f64 * 0.71).sin();
        }
        net
    }

    fn fast_config(tau: f64) -> DetectorConfig {
        DetectorConfig {
            tau,
            solver: SolverConfig::new(crate::ode::Method::Rk23, 1e-2),
            threshold: 0.0,
            ..DetectorConfig::default()
        }
    }

    fn series(t: usize) -> TimeSeries {
        let v = Array2::from_shape_fn((t, 2), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        TimeSeries::new(v).unwrap().with_labels((0..t).map(|i| u8::from(i % 5 == 0)).collect()).unwrap()
    }

    #[test]
    fn combination_products() {
        assert_eq!(combine(2.0, 3.0, 9.0, Combination::RP), 6.0);
        assert_eq!(combine(2.0, 3.0, 4.0, Combination::RPG), 24.0);
        assert_eq!(combine(1.0, 1.0, 7.0, Combination::G), 7.0);
        assert_eq!(combine(2.0, -3.0, 4.0, Combination::P), -3.0);
        assert_eq!("rpg".parse::<Combination>().unwrap(), Combination::RPG);
        assert!("RX".parse::<Combination>().is_err());
    }

    #[test]
    fn probability_is_min_shifted_only_in_products() {
        let r = [1.0, 2.0, 3.0];
        let p = [-5.0, -4.0, 1.0];
        let g = [1.0, 1.0, 1.0];
        assert_eq!(combine_series(&r, &p, &g, Combination::P), p.to_vec());
        assert_eq!(combine_series(&r, &p, &g, Combination::RP), vec![0.0, 2.0, 18.0]);
        assert_eq!(combine_series(&r, &p, &g, Combination::RG), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn measurement_arithmetic() {
        assert_eq!(squared_distance(&[1.0, 2.0], &[0.0, 0.0]), 5.0);
        assert_eq!(squared_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(l1_norm(&[1.0, -2.0, 0.5, 0.0]), 3.5);
        assert_eq!(l1_norm(&[0.0; 4]), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert!((percentile(&v, 95.0).unwrap() - 4.8).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&v, 101.0).is_err());
    }

    #[test]
    fn tau_zero_purification_is_identity() {
        let net = tiny_net();
        let cond: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let (out, nfe) = purify(&net, &cond, 0.0, 1, &SolverConfig::default()).unwrap();
        assert_eq!(out, cond);
        assert_eq!(nfe.count, 0);
        let (out, nfe) = purify(&net, &cond, 0.1, 1, &SolverConfig::default()).unwrap();
        assert_eq!(out.len(), cond.len());
        assert!(nfe.count > 0);
    }

    #[test]
    fn minimal_series_scores_one_step() {
        let net = tiny_net();
        let s = series(5);
        let out = score_series(&net, &s, &fast_config(0.0)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.end_index, vec![5]);
        assert_eq!(out.labels.as_deref(), Some(&[0u8][..]));
        assert_eq!(out.nfe[0].purify, 0);
        assert_eq!(out.nfe[0].grad, 1);
        assert!(out.recon[0] >= 0.0 && out.grad[0] >= 0.0);
        assert!(score_series(&net, &series(4), &fast_config(0.0)).is_err());
    }

    #[test]
    fn scoring_is_deterministic_and_worker_independent() {
        let net = tiny_net();
        let s = series(9);
        let a = score_series(&net, &s, &fast_config(0.1)).unwrap();
        let b = score_series(&net, &s, &DetectorConfig { workers: 2, ..fast_config(0.1) }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.nfe.iter().all(|n| n.purify > 0));
    }

    #[test]
    fn rejects_off_grid_tau_and_wrong_dim() {
        let net = tiny_net();
        assert!(score_series(&net, &series(9), &fast_config(0.3)).is_err());
        let one_dim = TimeSeries::new(Array2::zeros((9, 1))).unwrap();
        assert!(matches!(
            score_series(&net, &one_dim, &fast_config(0.0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let net = tiny_net();
        let out = score_series(&net, &series(8), &fast_config(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        out.write_csv(&p, &["seed=0".into()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("# tau=0 combination=RPG"));
        assert!(text.contains("t,recon,prob,grad,combined,predicted,label"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);
        let q = dir.path().join("n.csv");
        out.write_nfe_csv(&q, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap().lines().count(), 5);
    }

    #[test]
    fn consistency_zero_perturbation_never_flags() {
        let r = consistency_from(&[1.0, 2.0], -3.0, -3.0, &[0.0, 0.0], 0.0);
        assert_eq!(r.ratio, 0.0);
        assert!(!r.flagged);
    }

    #[test]
    fn consistency_holds_for_analytic_gaussian() {
        let logp = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let mut rng = rng::stream(3, Stream::Evaluation);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: Vec<f64> = (0..6).map(|_| 1e-3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            let score: Vec<f64> = x.iter().map(|v| -v).collect();
            let xe: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let eps_norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = consistency_from(&score, logp(&x), logp(&xe), &eps, 0.5 * eps_norm + 1e-12);
            assert!(!r.flagged, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn ranking_invariant_to_positive_rescaling(
            vals in prop::collection::vec((0.0f64..10.0, -5.0f64..5.0, 0.0f64..10.0), 2..30),
            c in 0.1f64..10.0,
            which in 0usize..3,
        ) {
            let mut r: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let mut p: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let mut g: Vec<f64> = vals.iter().map(|v| v.2).collect();
            for mode in Combination::ALL.into_iter().filter(|m| m.is_product()) {
                let before = combine_series(&r, &p, &g, mode);
                let target = match which { 0 => &mut r, 1 => &mut p, _ => &mut g };
                let saved = target.clone();
                target.iter_mut().for_each(|v| *v *= c);
                let after = combine_series(&r, &p, &g, mode);
                match which { 0 => r = saved, 1 => p = saved, _ => g = saved };
                for i in 0..before.len() {
                    for j in 0..before.len() {
                        if before[i] < before[j] * (1.0 - 1e-9) - 1e-12 {
                            prop_assert!(after[i] <= after[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn predictions_monotone_in_threshold(
            scores in prop::collection::vec(-10.0f64..10.0, 1..50),
            lo in -10.0f64..10.0,
            d in 0.0f64..5.0,
        ) {
            let a = apply_threshold(&scores, lo);
            let b = apply_threshold(&scores, lo + d);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y <= x);
            }
        }
    }
}
