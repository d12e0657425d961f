//! Exact and Hutchinson log-likelihoods from the probability-flow ODE,
//! compared with the analytic standard-normal density on the data rows.
//!
//! cargo run --release --example likelihood

use ndarray::Array2;
use sgm_anomaly::data::TimeSeries;
use sgm_anomaly::nn::{ScoreNetConfig, ScoreNetwork};
use sgm_anomaly::ode::SolverConfig;
use sgm_anomaly::rng::{self, Stream};
use sgm_anomaly::sampler::{log_likelihood, log_likelihood_terms, TraceEstimator};
use sgm_anomaly::sde::{prior_logpdf, prior_sample, SdeSchedule};
use sgm_anomaly::train::{self, TrainConfig};

fn main() -> sgm_anomaly::Result<()> {
    let (omega, dim) = (4, 2);
    let mut r = rng::stream(3, Stream::Data);
    let series = TimeSeries::new(Array2::from_shape_vec((2000, dim), prior_sample(2000 * dim, &mut r)).unwrap())?;
    let net = ScoreNetwork::init(
        ScoreNetConfig { channel_width: 16, time_embed_dim: 16, seed: 3, ..ScoreNetConfig::new(omega, dim) },
        SdeSchedule::default(),
    )?;
    let cfg = TrainConfig { n_iter: 4000, learning_rate: 1e-3, batch_size: 64, seed: 3, ..TrainConfig::default() };
    let (net, _) = train::train(net, &series, &cfg)?;

    let solver = SolverConfig::default();
    let n = (omega + 1) * dim;
    let data_rows = omega * dim;
    for i in 0..5 {
        // A window whose last row is zero, as in the zero-condition training term.
        let mut x = prior_sample(n, &mut r);
        x[data_rows..].iter_mut().for_each(|v| *v = 0.0);
        let (terms, nfe) = log_likelihood_terms(&net, &x, None, &solver)?;
        let model: f64 = terms[..data_rows].iter().sum();
        let exact = prior_logpdf(&x[..data_rows]);
        let (joint, _) = log_likelihood(&net, &x, None, &solver, &TraceEstimator::exact())?;
        let (hutch, _) = log_likelihood(&net, &x, None, &solver, &TraceEstimator::hutchinson(4, i))?;
        println!(
            "window {i}: data rows {model:8.3} vs analytic {exact:8.3} ({:+.3} nats/dim); joint exact {joint:8.3}, Hutchinson {hutch:8.3}; NFE {}",
            (model - exact) / data_rows as f64,
            nfe.count
        );
    }
    Ok(())
}
