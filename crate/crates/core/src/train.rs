//! Dual denoising score matching: `E[λ(l) (L1 + L2)]` over sliding windows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;

use crate::data::{window_at, window_count, TimeSeries, Window};
use crate::error::{Error, Result};
use crate::nn::{self, GradientSet, ScoreNetwork};
use crate::rng::{self, Rng, Stream};
use crate::sde::{prior_sample, SdeSchedule};

/// Weighting of the per-time losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaMode {
    /// `λ(l) = std(l)²`
    #[default]
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_iter: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub lambda: LambdaMode,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_iter: 2000,
            batch_size: 64,
            learning_rate: 2e-4,
            grad_clip_norm: 1.0,
            lambda: LambdaMode::Variance,
            checkpoint_every: 0,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidArgument("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-mean losses of one step. `l1` and `l2` are unweighted; `total` is
/// the optimised objective `mean λ(l)(L1 + L2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn weight_lambda(schedule: &SdeSchedule, l: f64) -> f64 {
    schedule.moments(l).std.powi(2)
}

fn check_l(schedule: &SdeSchedule, l: f64) -> Result<()> {
    if l < schedule.t_eps || l > 1.0 {
        return Err(Error::TimeOutOfRange(l));
    }
    Ok(())
}

/// Condition rows followed by one zero row.
pub fn zero_padded_condition(window: &Window) -> Array2<f64> {
    let (omega, m) = window.condition.dim();
    let mut xbar = Array2::zeros((omega + 1, m));
    xbar.slice_mut(ndarray::s![..omega, ..]).assign(&window.condition);
    xbar
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn mean_sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Conditional DSM loss on the full target window.
pub fn loss_l1(net: &ScoreNetwork, window: &Window, l: f64, noise: &[f64]) -> Result<f64> {
    check_l(net.schedule(), l)?;
    let (xl, target) = net.schedule().perturb(&flat(&window.target), l, noise)?;
    let cond = flat(&window.condition);
    let s = net.forward_batch(&xl, &[Some(&cond)], &[l])?;
    Ok(mean_sq_err(&s, &target))
}

/// Unconditional DSM loss on the zero-padded condition.
pub fn loss_l2(net: &ScoreNetwork, window: &Window, l: f64, noise: &[f64]) -> Result<f64> {
    check_l(net.schedule(), l)?;
    let (xl, target) = net.schedule().perturb(&flat(&zero_padded_condition(window)), l, noise)?;
    let s = net.forward_batch(&xl, &[None], &[l])?;
    Ok(mean_sq_err(&s, &target))
}

/// Adam with bias correction. Parameters are rounded to `f32` after every
/// update so checkpoints stay exact.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut ScoreNetwork, grads: &GradientSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = net.params_mut();
        for (((p, g), m), v) in params
            .flat_mut()
            .iter_mut()
            .zip(grads.flat())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        params.round_to_f32();
    }
}

/// Objective and parameter gradient for a batch with fixed `(l, noise)` per
/// window. L1 and L2 share the pair.
pub fn batch_objective(
    net: &ScoreNetwork,
    batch: &[Window],
    ls: &[f64],
    noises: &[Vec<f64>],
) -> Result<(f64, f64, f64, GradientSet)> {
    let schedule = net.schedule();
    let b = batch.len();
    let n = net.config().window_numel();
    let mut x = Vec::with_capacity(2 * b * n);
    let mut targets = Vec::with_capacity(2 * b * n);
    let conds: Vec<Vec<f64>> = batch.iter().map(|w| flat(&w.condition)).collect();
    for (w, (&l, noise)) in batch.iter().zip(ls.iter().zip(noises)) {
        check_l(schedule, l)?;
        let (xl, tgt) = schedule.perturb(&flat(&w.target), l, noise)?;
        x.extend(xl);
        targets.extend(tgt);
    }
    for (w, (&l, noise)) in batch.iter().zip(ls.iter().zip(noises)) {
        let (xl, tgt) = schedule.perturb(&flat(&zero_padded_condition(w)), l, noise)?;
        x.extend(xl);
        targets.extend(tgt);
    }
    let mut cond_refs: Vec<Option<&[f64]>> = conds.iter().map(|c| Some(c.as_slice())).collect();
    cond_refs.extend(std::iter::repeat_n(None, b));
    let mut all_ls = ls.to_vec();
    all_ls.extend_from_slice(ls);

    let pass = net.trace(&x, &cond_refs, &all_ls)?;
    let s = pass.scores();
    let (mut l1, mut l2, mut total) = (0.0, 0.0, 0.0);
    let mut cot = vec![0.0; s.len()];
    for k in 0..2 * b {
        let r = k * n..(k + 1) * n;
        let lam = weight_lambda(schedule, all_ls[k]);
        let e = mean_sq_err(&s[r.clone()], &targets[r.clone()]);
        if k < b {
            l1 += e;
        } else {
            l2 += e;
        }
        total += lam * e;
        let scale = lam * 2.0 / (n * b) as f64;
        for i in r {
            cot[i] = scale * (s[i] - targets[i]);
        }
    }
    let mut grads = GradientSet::zeros_like(net.params());
    pass.backward(&cot, &mut grads)?;
    let bf = b as f64;
    Ok((l1 / bf, l2 / bf, total / bf, grads))
}

/// One optimisation step on `batch`, drawing `l ~ U[t_eps, 1]` and the noise
/// from `rng`.
pub fn train_step(
    net: &mut ScoreNetwork,
    adam: &mut Adam,
    batch: &[Window],
    rng: &mut Rng,
    config: &TrainConfig,
    iteration: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let t_eps = net.schedule().t_eps;
    let n = net.config().window_numel();
    let mut ls = Vec::with_capacity(batch.len());
    let mut noises = Vec::with_capacity(batch.len());
    for _ in batch {
        ls.push(rng.random_range(t_eps..=1.0));
        noises.push(prior_sample(n, rng));
    }
    let abort = |message: String| Error::TrainingAborted { iteration, message };
    let (l1, l2, total, mut grads) = batch_objective(net, batch, &ls, &noises).map_err(|e| abort(e.to_string()))?;
    if !total.is_finite() {
        return Err(abort(format!("non-finite loss (L1 {l1}, L2 {l2})")));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(abort(format!("non-finite gradient in {name}")));
    }
    let grad_norm = grads.clip_global_norm(config.grad_clip_norm);
    adam.step(net, &grads);
    if !net.params().is_finite() {
        return Err(abort("parameters became non-finite".into()));
    }
    Ok(LossReport {
        iteration,
        l1,
        l2,
        total,
        grad_norm,
    })
}

/// Path of the checkpoint written after `iteration` steps.
pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:07}.bin"))
}

/// Runs `config.n_iter` steps over windows drawn uniformly with replacement.
pub fn train(mut net: ScoreNetwork, series: &TimeSeries, config: &TrainConfig) -> Result<(ScoreNetwork, Vec<LossReport>)> {
    let history = train_with(&mut net, series, config, |_| {})?;
    Ok((net, history))
}

/// Like [`train`] but calls `on_step` after every iteration.
pub fn train_with(
    net: &mut ScoreNetwork,
    series: &TimeSeries,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let omega = net.config().omega;
    if series.dim() != net.config().dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", net.config().dim),
            got: format!("{}", series.dim()),
        });
    }
    let n_windows = window_count(series.len(), omega);
    if n_windows == 0 {
        return Err(Error::InvalidArgument(format!(
            "series of length {} has no window of length {}",
            series.len(),
            omega + 1
        )));
    }
    if config.checkpoint_every > 0 {
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut rng = rng::stream(config.seed, Stream::Training);
    let mut adam = Adam::new(net.param_count(), config.learning_rate);
    let mut history = Vec::with_capacity(config.n_iter);
    for it in 1..=config.n_iter {
        let batch: Vec<Window> = (0..config.batch_size)
            .map(|_| window_at(series, omega, rng.random_range(0..n_windows)))
            .collect();
        let report = train_step(net, &mut adam, &batch, &mut rng, config, it)?;
        on_step(&report);
        history.push(report);
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                nn::save(net, &checkpoint_path(dir, it))?;
            }
        }
    }
    Ok(history)
}

/// Loss history as CSV (`iteration,l1,l2,total`).
pub fn write_loss_csv(history: &[LossReport], path: &Path, comments: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "iteration,l1,l2,total")?;
        for r in history {
            writeln!(w, "{},{},{},{}", r.iteration, r.l1, r.l2, r.total)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ScoreNetConfig;
    use ndarray::Array2;

    fn small_net(seed: u64) -> ScoreNetwork {
        let cfg = ScoreNetConfig {
            channel_width: 8,
            time_embed_dim: 8,
            n_layer: 2,
            n_resnet: 1,
            seed,
            ..ScoreNetConfig::new(4, 2)
        };
        ScoreNetwork::init(cfg, SdeSchedule::default()).unwrap()
    }

    fn gaussian(len: usize, seed: u64) -> TimeSeries {
        let mut r = rng::stream(seed, Stream::Data);
        let v = prior_sample(len * 2, &mut r);
        TimeSeries::new(Array2::from_shape_vec((len, 2), v).unwrap()).unwrap()
    }

    fn small_config(n_iter: usize) -> TrainConfig {
        TrainConfig {
            n_iter,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_is_the_kernel_variance() {
        let s = SdeSchedule::default();
        assert!(weight_lambda(&s, s.t_eps) < 1e-5);
        assert!((weight_lambda(&s, 1.0) - 0.99996).abs() < 1e-5);
        let mut prev = 0.0;
        for k in 0..=100 {
            let l = s.t_eps + (1.0 - s.t_eps) * k as f64 / 100.0;
            let lam = weight_lambda(&s, l);
            assert!(lam > prev);
            prev = lam;
        }
    }

    #[test]
    fn zero_score_losses_match_hand_formula() {
        let net = small_net(1);
        let series = gaussian(20, 1);
        let w = window_at(&series, 4, 3);
        let mut r = rng::stream(2, Stream::Evaluation);
        let noise = prior_sample(10, &mut r);
        for l in [0.05, 0.5, 1.0] {
            let std = net.schedule().moments(l).std;
            let expect = noise.iter().map(|n| (n / std).powi(2)).sum::<f64>() / 10.0;
            assert!((loss_l1(&net, &w, l, &noise).unwrap() - expect).abs() < 1e-9 * expect);
            assert!((loss_l2(&net, &w, l, &noise).unwrap() - expect).abs() < 1e-9 * expect);
        }
        assert!(matches!(loss_l1(&net, &w, 0.0, &noise), Err(Error::TimeOutOfRange(_))));
    }

    #[test]
    fn zero_padded_condition_appends_a_zero_row() {
        let w = Window::from_target(Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j + 1) as f64), 4);
        let xbar = zero_padded_condition(&w);
        assert_eq!(xbar.dim(), (4, 2));
        assert_eq!(xbar.row(3).to_vec(), vec![0.0, 0.0]);
        assert_eq!(xbar.row(1).to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn batch_objective_equals_per_sample_average() {
        let mut net = small_net(2);
        for (i, v) in net.params_mut().flat_mut().iter_mut().enumerate() {
            *v += 0.03 * (i as f64 * 0.41).cos();
        }
        let series = gaussian(30, 2);
        let batch: Vec<Window> = (0..5).map(|j| window_at(&series, 4, j * 4)).collect();
        let mut r = rng::stream(4, Stream::Evaluation);
        let ls: Vec<f64> = (0..5).map(|k| 0.1 + 0.2 * k as f64).collect();
        let noises: Vec<Vec<f64>> = (0..5).map(|_| prior_sample(10, &mut r)).collect();
        let (l1, l2, total, _) = batch_objective(&net, &batch, &ls, &noises).unwrap();
        let (mut e1, mut e2, mut et) = (0.0, 0.0, 0.0);
        for k in 0..5 {
            let a = loss_l1(&net, &batch[k], ls[k], &noises[k]).unwrap();
            let b = loss_l2(&net, &batch[k], ls[k], &noises[k]).unwrap();
            e1 += a / 5.0;
            e2 += b / 5.0;
            et += weight_lambda(net.schedule(), ls[k]) * (a + b) / 5.0;
        }
        assert!((l1 - e1).abs() < 1e-6 && (l2 - e2).abs() < 1e-6 && (total - et).abs() < 1e-6);
        assert!(l1 >= 0.0 && l2 >= 0.0);
    }

    #[test]
    fn training_is_reproducible() {
        let series = gaussian(60, 5);
        let (a, ha) = train(small_net(5), &series, &small_config(15)).unwrap();
        let (b, hb) = train(small_net(5), &series, &small_config(15)).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params().flat(), b.params().flat());
        assert_eq!(ha.len(), 15);
        assert!(ha.iter().all(|r| r.total.is_finite() && r.l1 >= 0.0 && r.l2 >= 0.0));
    }

    #[test]
    fn zero_iterations_leave_the_network_unchanged() {
        let net = small_net(6);
        let (out, hist) = train(net.clone(), &gaussian(30, 6), &small_config(0)).unwrap();
        assert!(hist.is_empty());
        assert_eq!(out.params().flat(), net.params().flat());
    }

    #[test]
    fn clipped_update_respects_the_norm() {
        let mut net = small_net(7);
        for (i, v) in net.params_mut().flat_mut().iter_mut().enumerate() {
            *v += 0.05 * (i as f64 * 0.13).sin();
        }
        let series = gaussian(30, 7);
        let batch: Vec<Window> = (0..4).map(|j| window_at(&series, 4, j)).collect();
        let mut r = rng::stream(7, Stream::Evaluation);
        let ls = vec![0.01, 0.2, 0.5, 0.9];
        let noises: Vec<Vec<f64>> = (0..4).map(|_| prior_sample(10, &mut r)).collect();
        let (_, _, _, mut g) = batch_objective(&net, &batch, &ls, &noises).unwrap();
        let before = g.global_norm();
        let clip = before / 10.0;
        assert_eq!(g.clip_global_norm(clip), before);
        assert!(g.global_norm() <= clip * (1.0 + 1e-12));
    }

    #[test]
    fn loss_decreases_on_gaussian_data() {
        let series = gaussian(500, 8);
        let cfg = TrainConfig {
            n_iter: 1000,
            batch_size: 16,
            ..small_config(0)
        };
        let (_, h) = train(small_net(8), &series, &cfg).unwrap();
        let early = h[..100].iter().map(|r| r.total).sum::<f64>() / 100.0;
        let late = h[900..].iter().map(|r| r.total).sum::<f64>() / 100.0;
        assert!(late < early, "early {early} late {late}");
    }

    #[test]
    fn checkpoints_and_loss_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 4,
            checkpoint_dir: Some(dir.path().join("ck")),
            ..small_config(10)
        };
        let (net, hist) = train(small_net(9), &gaussian(30, 9), &cfg).unwrap();
        for it in [4, 8] {
            assert!(checkpoint_path(&dir.path().join("ck"), it).exists());
        }
        assert!(!checkpoint_path(&dir.path().join("ck"), 10).exists());
        let last = nn::load(&checkpoint_path(&dir.path().join("ck"), 8)).unwrap();
        assert_eq!(last.config(), net.config());
        let p = dir.path().join("loss.csv");
        write_loss_csv(&hist, &p, &["seed=3".into()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 11);
        assert!(text.contains("iteration,l1,l2,total"));
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(TrainConfig { batch_size: 0, ..small_config(1) }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..small_config(1) }.validate().is_err());
        let one_dim = TimeSeries::new(Array2::zeros((30, 1))).unwrap();
        assert!(train(small_net(1), &one_dim, &small_config(1)).is_err());
        assert!(train(small_net(1), &gaussian(4, 1), &small_config(1)).is_err());
    }
}
