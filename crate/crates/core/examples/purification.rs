//! Partial diffusion followed by denoising pulls a corrupted condition back
//! towards the clean data manifold. Trains a model on clean AR(1) data, injects
//! one spike per window and compares distances before and after purification.
//!
//! cargo run --release --example purification

use rand::Rng;
use sgm_anomaly::anomaly::{purify, squared_distance};
use sgm_anomaly::data::{self, AnomalyKind, BaseProcess, Scaler, SynthSpec, TimeSeries};
use sgm_anomaly::nn::{ScoreNetConfig, ScoreNetwork};
use sgm_anomaly::ode::SolverConfig;
use sgm_anomaly::rng::{self, Stream};
use sgm_anomaly::sde::SdeSchedule;
use sgm_anomaly::train::{self, TrainConfig};

fn main() -> sgm_anomaly::Result<()> {
    let (omega, dim) = (10, 2);
    let spec = |length, seed| SynthSpec {
        length,
        dim,
        base: BaseProcess::Ar1(0.8),
        anomaly: AnomalyKind::Spike,
        magnitude: 5.0,
        rate: 0.0,
        seed,
    };
    let train_raw = TimeSeries::new(data::generate_clean(&spec(2000, 1))?)?;
    let scaler = Scaler::fit(&train_raw);
    let train_set = scaler.apply(&train_raw)?;
    let clean = scaler.apply(&TimeSeries::new(data::generate_clean(&spec(1000, 2))?)?)?;

    let net = ScoreNetwork::init(
        ScoreNetConfig { channel_width: 16, time_embed_dim: 16, seed: 1, ..ScoreNetConfig::new(omega, dim) },
        SdeSchedule::default(),
    )?;
    let cfg = TrainConfig { n_iter: 1500, learning_rate: 1e-3, batch_size: 32, seed: 1, ..TrainConfig::default() };
    let (net, _) = train::train(net, &train_set, &cfg)?;

    let solver = SolverConfig::default();
    let mut r = rng::stream(4, Stream::Evaluation);
    for tau in [0.0, 0.05, 0.1, 0.2] {
        let (mut closer, mut before, mut after, mut nfe) = (0, 0.0, 0.0, 0);
        let trials = 40;
        for trial in 0..trials {
            let w = data::window_at(&clean, omega, trial * 20);
            let c: Vec<f64> = w.condition.iter().copied().collect();
            let mut spiked = c.clone();
            let row = r.random_range(0..omega);
            for j in 0..dim {
                let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
                spiked[row * dim + j] += sign * 5.0 / (scaler.max[j] - scaler.min[j]);
            }
            let (p, n) = purify(&net, &spiked, tau, trial as u64, &solver)?;
            let (d0, d1) = (squared_distance(&spiked, &c).sqrt(), squared_distance(&p, &c).sqrt());
            closer += usize::from(d1 < d0);
            before += d0 / trials as f64;
            after += d1 / trials as f64;
            nfe += n.count;
        }
        println!(
            "tau {tau:<4}: closer to clean in {closer}/{trials}, mean distance {before:.3} -> {after:.3}, mean NFE {:.1}",
            nfe as f64 / trials as f64
        );
    }
    Ok(())
}
