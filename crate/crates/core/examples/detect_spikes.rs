//! End-to-end run through the file-based pipeline: synthesise data, train,
//! score every test window and sweep thresholds for each combination mode.
//!
//! cargo run --release --example detect_spikes -- [out_dir]
//!
//! Sizes are reduced so the run finishes in a few minutes on one core.

use sgm_anomaly::config::RunConfig;
use sgm_anomaly::pipeline;

fn main() -> sgm_anomaly::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "detect_example".into());
    let overrides = vec![
        format!("out={out}"),
        format!("data.train={out}/train.csv"),
        format!("data.test={out}/test.csv"),
        "seed=7".into(),
        "synth.train_length=1500".into(),
        "synth.test_length=400".into(),
        "model.channel_width=16".into(),
        "model.time_embed_dim=16".into(),
        "train.n_iter=1500".into(),
        "train.learning_rate=1e-3".into(),
        "detect.calibration_windows=100".into(),
    ];
    let cfg = RunConfig::resolve(None, &overrides)?;
    pipeline::cmd_synth(&cfg)?;
    let trained = pipeline::cmd_train(&cfg)?;
    println!("trained; final objective {:.4}", trained.history.last().map_or(f64::NAN, |h| h.total));

    let series = pipeline::cmd_detect(&cfg)?;
    let [p, r, l, g] = pipeline::mean_nfe(&series.nfe);
    println!(
        "scored {} steps at threshold {:.3e}; mean NFE purify {p:.0} recon {r:.0} prob {l:.0} grad {g:.0}",
        series.len(),
        series.threshold
    );

    let eval = pipeline::cmd_eval(&cfg)?;
    println!("{:<4} {:>7} {:>7} {:>7}", "mode", "F1", "F1_PA", "AUC");
    for m in &eval.modes {
        println!("{:<4} {:>7.3} {:>7.3} {:>7.3}", m.combination.name(), m.result.f1_plain, m.result.f1_pa, m.result.auc);
    }
    Ok(())
}
