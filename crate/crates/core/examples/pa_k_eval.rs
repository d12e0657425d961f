//! Point adjustment with a K% rule, the F1 curve over K and its area, and the
//! threshold sweep, on hand-made scores.
//!
//! cargo run --example pa_k_eval

use sgm_anomaly::eval::{self, Objective, K_GRID};

fn main() -> sgm_anomaly::Result<()> {
    let labels: Vec<u8> = vec![0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0];
    let scores = vec![0.1, 0.2, 0.9, 0.3, 0.2, 0.4, 0.1, 0.6, 0.2, 0.3, 0.8, 0.1, 0.2, 0.1, 0.3, 0.2, 0.1, 0.1];
    let segments = eval::find_segments(&labels);
    println!("segments: {:?}", segments.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>());

    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    for k in [0.0, 0.25, 0.5, 1.0] {
        let adjusted = eval::pa_k_adjust(&preds, &segments, k)?;
        let (p, r, f1) = eval::precision_recall_f1(&adjusted, &labels)?;
        println!("K = {k:<4} adjusted {adjusted:?}  P {p:.2} R {r:.2} F1 {f1:.3}");
    }

    let curve = eval::f1_pa_k_curve(&scores, &labels, 0.5)?;
    for (k, f) in K_GRID.iter().zip(&curve.f1) {
        println!("  K {k:.1}  F1 {f:.3}");
    }
    println!("threshold 0.5: {}", curve.summary());

    for objective in [Objective::F1Pa, Objective::Auc] {
        let (delta, best) = eval::best_threshold_sweep(&scores, &labels, objective, None)?;
        println!("best by {objective:?}: threshold {delta:.3}, {}", best.summary());
    }
    Ok(())
}
