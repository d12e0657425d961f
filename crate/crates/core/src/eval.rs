//! Point-wise F1, point adjustment, PA%K, the F1 curve over K and the
//! threshold sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::anomaly::{apply_threshold, percentile};
use crate::error::{Error, Result};

/// `K ∈ {0, 0.1, …, 1}`.
pub const K_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Inclusive 0-based run of anomalous steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximal runs of 1s.
pub fn find_segments(labels: &[u8]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &y) in labels.iter().enumerate() {
        match (y != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Segment { start: s, end: i - 1 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment { start: s, end: labels.len() - 1 });
    }
    out
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} of length {a}"),
            got: format!("{b}"),
        });
    }
    Ok(())
}

/// Fills a segment with 1s when its detected fraction is strictly above `k`.
pub fn pa_k_adjust(preds: &[u8], segments: &[Segment], k: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("K = {k} outside [0, 1]")));
    }
    if let Some(s) = segments.iter().find(|s| s.end >= preds.len() || s.start > s.end) {
        return Err(Error::ShapeMismatch {
            expected: format!("segments within {} predictions", preds.len()),
            got: format!("segment [{}, {}]", s.start, s.end),
        });
    }
    let mut out = preds.to_vec();
    for s in segments {
        let hits = preds[s.start..=s.end].iter().filter(|&&p| p != 0).count();
        if hits as f64 / s.len() as f64 > k {
            out[s.start..=s.end].fill(1);
        }
    }
    Ok(out)
}

/// Point-wise precision, recall and F1; each is 0 when undefined.
pub fn precision_recall_f1(preds: &[u8], labels: &[u8]) -> Result<(f64, f64, f64)> {
    check_len(labels.len(), preds.len(), "predictions")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub k: Vec<f64>,
    pub f1: Vec<f64>,
    /// `K = 0` entry.
    pub f1_pa: f64,
    /// `K = 1` entry.
    pub f1_plain: f64,
    pub auc: f64,
    pub threshold: f64,
}

impl EvalResult {
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        for c in comments {
            writeln!(w, "# {c}").map_err(io)?;
        }
        writeln!(w, "# {}", self.summary()).map_err(io)?;
        writeln!(w, "K,F1").map_err(io)?;
        for (k, f) in self.k.iter().zip(&self.f1) {
            writeln!(w, "{k:.1},{f:.6}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn summary(&self) -> String {
        format!(
            "F1={:.4} F1_PA={:.4} AUC={:.4} threshold={:e}",
            self.f1_plain, self.f1_pa, self.auc, self.threshold
        )
    }
}

/// Trapezoidal area under `(x, y)`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// F1 after PA%K adjustment of `preds` for every `K` in `ks`.
pub fn f1_pa_k_from_preds(preds: &[u8], labels: &[u8], ks: &[f64]) -> Result<Vec<f64>> {
    check_len(labels.len(), preds.len(), "predictions")?;
    let segments = find_segments(labels);
    ks.iter()
        .map(|&k| precision_recall_f1(&pa_k_adjust(preds, &segments, k)?, labels).map(|r| r.2))
        .collect()
}

/// Thresholds `scores` at `threshold` and evaluates the 11-point curve.
pub fn f1_pa_k_curve(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult> {
    check_len(labels.len(), scores.len(), "scores")?;
    let preds = apply_threshold(scores, threshold);
    let f1 = f1_pa_k_from_preds(&preds, labels, &K_GRID)?;
    Ok(EvalResult {
        k: K_GRID.to_vec(),
        f1_pa: f1[0],
        f1_plain: f1[K_GRID.len() - 1],
        auc: trapezoid(&K_GRID, &f1),
        f1,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    F1Pa,
    Auc,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1_pa" | "f1pa" => Ok(Objective::F1Pa),
            "auc" => Ok(Objective::Auc),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?}"))),
        }
    }
}

/// `n` evenly spaced quantiles of `scores`, from the minimum to the maximum.
pub fn quantile_grid(scores: &[f64], n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument("quantile grid needs ≥ 2 points".into()));
    }
    (0..n).map(|i| percentile(scores, 100.0 * i as f64 / (n - 1) as f64)).collect()
}

/// The grid threshold maximizing `objective`; ties go to the larger
/// threshold. `grid = None` uses 100 quantiles of the scores.
pub fn best_threshold_sweep(
    scores: &[f64],
    labels: &[u8],
    objective: Objective,
    grid: Option<&[f64]>,
) -> Result<(f64, EvalResult)> {
    let grid = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::InvalidArgument("empty threshold grid".into())),
        None => quantile_grid(scores, 100)?,
    };
    let mut best: Option<EvalResult> = None;
    for &d in &grid {
        let r = f1_pa_k_curve(scores, labels, d)?;
        let value = |r: &EvalResult| match objective {
            Objective::F1Pa => r.f1_pa,
            Objective::Auc => r.auc,
        };
        let better = match &best {
            None => true,
            Some(b) => value(&r) > value(b) || (value(&r) == value(b) && d > b.threshold),
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("grid is non-empty");
    Ok((best.threshold, best))
}
