//! Function evaluations needed by the adaptive ODE samplers versus a fixed-step
//! reverse-SDE sampler.
//!
//! cargo run --release --example solver_nfe

use ndarray::Array2;
use sgm_anomaly::data::TimeSeries;
use sgm_anomaly::nn::{ScoreNetConfig, ScoreNetwork};
use sgm_anomaly::ode::{Method, SolverConfig};
use sgm_anomaly::rng::{self, Stream};
use sgm_anomaly::sampler::{sample_pf_ode, sample_reverse_sde};
use sgm_anomaly::sde::{prior_sample, SdeSchedule};
use sgm_anomaly::train::{self, TrainConfig};

fn main() -> sgm_anomaly::Result<()> {
    let cfg = ScoreNetConfig { channel_width: 16, time_embed_dim: 16, ..ScoreNetConfig::new(10, 2) };
    let net = ScoreNetwork::init(cfg, SdeSchedule::default())?;
    let mut r = rng::stream(5, Stream::Data);
    let data = Array2::from_shape_vec((1000, cfg.dim), prior_sample(1000 * cfg.dim, &mut r)).unwrap();
    let train_cfg = TrainConfig { n_iter: 400, learning_rate: 1e-3, batch_size: 32, ..TrainConfig::default() };
    let (net, _) = train::train(net, &TimeSeries::new(data)?, &train_cfg)?;
    let cond = prior_sample(cfg.omega * cfg.dim, &mut r);

    println!("{:<8} {:>6} {:>10}", "method", "tol", "mean NFE");
    for method in [Method::Rk23, Method::Rk45, Method::Dop853] {
        for tol in [1e-2, 1e-3, 1e-5] {
            let solver = SolverConfig::new(method, tol);
            let mut total = 0;
            for seed in 0..5 {
                total += sample_pf_ode(&net, Some(&cond), seed, &solver)?.1.count;
            }
            println!("{:<8} {tol:>6.0e} {:>10.1}", method.name(), total as f64 / 5.0);
        }
    }
    let (x, nfe) = sample_reverse_sde(&net, Some(&cond), 0, 2000)?;
    println!("reverse SDE, 2000 Euler-Maruyama steps: NFE {}, last row {:?}", nfe.count, &x[x.len() - cfg.dim..]);
    Ok(())
}
