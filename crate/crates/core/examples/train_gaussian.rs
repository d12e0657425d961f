//! Trains a small score network on i.i.d. standard-normal data and checks the
//! learned score against the exact one, `-x_l` for every diffusion time.
//!
//! cargo run --release --example train_gaussian

use ndarray::Array2;
use sgm_anomaly::data::{self, TimeSeries};
use sgm_anomaly::nn::{self, ScoreNetConfig, ScoreNetwork};
use sgm_anomaly::rng::{self, Stream};
use sgm_anomaly::sde::{prior_sample, SdeSchedule};
use sgm_anomaly::train::{self, TrainConfig};

fn main() -> sgm_anomaly::Result<()> {
    let (omega, dim) = (6, 2);
    let mut r = rng::stream(1, Stream::Data);
    let values = Array2::from_shape_vec((2000, dim), prior_sample(2000 * dim, &mut r)).unwrap();
    let series = TimeSeries::new(values)?;

    let net_cfg = ScoreNetConfig {
        channel_width: 16,
        time_embed_dim: 16,
        seed: 1,
        ..ScoreNetConfig::new(omega, dim)
    };
    let net = ScoreNetwork::init(net_cfg, SdeSchedule::default())?;
    println!("{} parameters", net.param_count());
    let cfg = TrainConfig {
        n_iter: 800,
        learning_rate: 1e-3,
        batch_size: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let (net, history) = train::train(net, &series, &cfg)?;
    for chunk in history.chunks(200) {
        let mean = chunk.iter().map(|h| h.total).sum::<f64>() / chunk.len() as f64;
        println!("iterations {:>4}..{:>4}  mean objective {mean:.4}", chunk[0].iteration, chunk[chunk.len() - 1].iteration);
    }

    // The conditioned rows carry data; compare their scores with -x.
    let w = data::window_at(&series, omega, 100);
    let mut noise_rng = rng::stream(2, Stream::Evaluation);
    for l in [0.05, 0.3, 0.9] {
        let noise = prior_sample(w.target.len(), &mut noise_rng);
        let (x_l, _) = net.schedule().perturb(w.target.as_slice().unwrap(), l, &noise)?;
        let x_l = Array2::from_shape_vec(w.target.dim(), x_l).unwrap();
        let s = net.forward(x_l.view(), None, l)?;
        let n = omega * dim;
        let err: f64 = s.iter().zip(x_l.iter()).take(n).map(|(a, b)| (a + b).powi(2)).sum::<f64>() / n as f64;
        println!("l = {l:.2}: RMS error of the learned score on data rows {:.3}", err.sqrt());
    }

    let path = std::env::temp_dir().join("gaussian_example.ckpt");
    nn::save(&net, &path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
