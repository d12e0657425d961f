//! Generates a labelled synthetic series and writes it as CSV.
//!
//! cargo run --release --example synth_data -- [out.csv]

use sgm_anomaly::data::{self, AnomalyKind, BaseProcess, SynthSpec};
use sgm_anomaly::eval::find_segments;

fn main() -> sgm_anomaly::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic.csv".into());
    for (name, anomaly) in [("spike", AnomalyKind::Spike), ("level shift", AnomalyKind::LevelShift)] {
        let spec = SynthSpec {
            length: 1000,
            dim: 3,
            base: BaseProcess::Ar1(0.8),
            anomaly,
            magnitude: 5.0,
            rate: 0.05,
            seed: 11,
        };
        let series = data::generate_synthetic(&spec)?;
        let labels = series.labels().unwrap_or(&[]);
        let positives = labels.iter().filter(|&&y| y == 1).count();
        println!(
            "{name:<12} {} steps x {} features, {positives} anomalous steps in {} segments",
            series.len(),
            series.dim(),
            find_segments(labels).len()
        );
        if anomaly == AnomalyKind::Spike {
            data::write_csv(&series, &out, &["example synthetic series".into()])?;
        }
    }

    let back = data::load_csv(&out, Some("label"))?;
    let (scaler, scaled, _) = data::fit_apply_scaler(&back, &[])?;
    let windows = data::sliding_windows(&scaled, 10)?;
    println!("wrote {out}; per-feature min {:?} max {:?}", scaler.min, scaler.max);
    println!("{} sliding windows of 11 rows; first ends at t = {}", windows.len(), windows[0].end_index);
    Ok(())
}
