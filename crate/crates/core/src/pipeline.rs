//! End-to-end commands: synthesize data, train, detect and evaluate. Each
//! command reads a [`RunConfig`] and writes its artifacts under `config.out`.

use std::path::{Path, PathBuf};

use crate::anomaly::{self, AnomalySeries, Combination, WindowNfe};
use crate::config::{RunConfig, ThresholdPolicy};
use crate::data::{self, window_count, Scaler, TimeSeries};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::nn::{self, ScoreNetConfig, ScoreNetwork};
use crate::train::{self, LossReport};

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const SCALER_CSV: &str = "scaler.csv";
pub const LOSS_CSV: &str = "loss.csv";
pub const ANOMALY_CSV: &str = "anomaly.csv";
pub const NFE_CSV: &str = "nfe.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const MODES_CSV: &str = "eval_modes.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a clean training series (no labels) and a labelled test series.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (train_spec, test_spec) = cfg.synth.specs(cfg.seed);
    let train_full = data::generate_synthetic(&train_spec)?;
    let train = TimeSeries::new(train_full.values().to_owned())?;
    let test = data::generate_synthetic(&test_spec)?;
    ensure_dir(&cfg.out)?;
    let (tp, sp) = (cfg.out.join(TRAIN_CSV), cfg.out.join(TEST_CSV));
    data::write_csv(&train, &tp, &cfg.header())?;
    data::write_csv(&test, &sp, &cfg.header())?;
    Ok((tp, sp))
}

pub struct TrainOutput {
    pub net: ScoreNetwork,
    pub scaler: Scaler,
    pub history: Vec<LossReport>,
    pub checkpoint: PathBuf,
}

/// Fits the scaler on the training CSV, trains, and writes the checkpoint,
/// scaler and loss history.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let train_path = RunConfig::require_existing("data.train", cfg.train_path.as_deref())?;
    let raw = data::load_csv(&train_path, Some(&cfg.label_column))?;
    let scaler = Scaler::fit(&raw);
    let series = scaler.apply(&raw)?;
    let net_cfg = ScoreNetConfig {
        dim: series.dim(),
        ..cfg.net
    };
    let net = ScoreNetwork::init(net_cfg, cfg.schedule)?;
    let mut train_cfg = cfg.train.clone();
    if train_cfg.checkpoint_every > 0 {
        train_cfg.checkpoint_dir = Some(cfg.out.join("checkpoints"));
    }
    ensure_dir(&cfg.out)?;
    let (net, history) = train::train(net, &series, &train_cfg)?;
    let checkpoint = cfg.out.join(CHECKPOINT);
    nn::save(&net, &checkpoint)?;
    scaler.write_csv(cfg.out.join(SCALER_CSV), &cfg.header())?;
    train::write_loss_csv(&history, &cfg.out.join(LOSS_CSV), &cfg.header())?;
    Ok(TrainOutput {
        net,
        scaler,
        history,
        checkpoint,
    })
}

/// Loads a checkpoint and refuses one whose window offset differs from the
/// configuration.
pub fn load_checked(cfg: &RunConfig, path: &Path) -> Result<ScoreNetwork> {
    let net = nn::load(path)?;
    if net.config().omega != cfg.net.omega {
        return Err(Error::Checkpoint(format!(
            "window offset mismatch: checkpoint has ω = {}, configuration has ω = {}",
            net.config().omega,
            cfg.net.omega
        )));
    }
    Ok(net)
}

fn check_dim(net: &ScoreNetwork, series: &TimeSeries, what: &str) -> Result<()> {
    if series.dim() != net.config().dim {
        return Err(Error::Checkpoint(format!(
            "feature count mismatch: checkpoint has m = {}, {what} has m = {}",
            net.config().dim,
            series.dim()
        )));
    }
    Ok(())
}

/// Evenly spaced window starts, at most `n` of them.
pub fn spread(count: usize, n: usize) -> Vec<usize> {
    if n == 0 || count == 0 {
        return Vec::new();
    }
    if n >= count {
        return (0..count).collect();
    }
    (0..n).map(|i| i * count / n).collect()
}

/// Threshold from the configured policy; the percentile policy scores up to
/// `calibration_windows` evenly spaced training windows.
pub fn resolve_threshold(cfg: &RunConfig, net: &ScoreNetwork, scaler: &Scaler) -> Result<f64> {
    match cfg.threshold {
        ThresholdPolicy::Fixed(d) => Ok(d),
        ThresholdPolicy::TrainPercentile(pct) => {
            let path = RunConfig::require_existing("data.train", cfg.train_path.as_deref())?;
            let train = scaler.apply(&data::load_csv(&path, Some(&cfg.label_column))?)?;
            check_dim(net, &train, "training data")?;
            let starts = spread(window_count(train.len(), net.config().omega), cfg.calibration_windows);
            let m = anomaly::measure_windows(net, &train, &starts, &cfg.detector)?;
            let s = anomaly::assemble(&m, None, &cfg.detector);
            anomaly::percentile(&s.combined, pct)
        }
    }
}

/// Scores the test CSV and writes the measurement and NFE CSVs.
pub fn cmd_detect(cfg: &RunConfig) -> Result<AnomalySeries> {
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    let test_path = RunConfig::require_existing("data.test", cfg.test_path.as_deref())?;
    let net = load_checked(cfg, &ckpt)?;
    let scaler_path = ckpt.parent().unwrap_or(Path::new(".")).join(SCALER_CSV);
    let scaler = Scaler::load(&scaler_path)?;
    let test = scaler.apply(&data::load_csv(&test_path, Some(&cfg.label_column))?)?;
    check_dim(&net, &test, "test data")?;
    let threshold = resolve_threshold(cfg, &net, &scaler)?;
    let detector = anomaly::DetectorConfig {
        threshold,
        ..cfg.detector.clone()
    };
    let series = anomaly::score_series(&net, &test, &detector)?;
    ensure_dir(&cfg.out)?;
    let mut header = cfg.header();
    header.push(format!("checkpoint={}", ckpt.display()));
    series.write_csv(&cfg.out.join(ANOMALY_CSV), &header)?;
    series.write_nfe_csv(&cfg.out.join(NFE_CSV), &header)?;
    Ok(series)
}

/// Summary of one mode under the threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub combination: Combination,
    pub result: EvalResult,
}

pub struct EvalOutput {
    /// Sweep over the combined column of the input file.
    pub result: EvalResult,
    /// Sweep per combination mode, recomputed from the stored measurements.
    pub modes: Vec<ModeSummary>,
}

/// Reads an anomaly CSV written by [`cmd_detect`].
pub fn read_anomaly_csv(path: &Path) -> Result<AnomalySeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tau = 0.0;
    let mut combination = Combination::RPG;
    let mut threshold = f64::INFINITY;
    for line in text.lines().filter(|l| l.starts_with('#')) {
        for tok in line.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("tau", v)) => tau = v.parse().unwrap_or(tau),
                Some(("combination", v)) => combination = v.parse().unwrap_or(combination),
                Some(("threshold", v)) => threshold = v.parse().unwrap_or(threshold),
                _ => {}
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let needed = ["t", "recon", "prob", "grad", "combined", "predicted"];
    let idx: Vec<usize> = needed
        .iter()
        .map(|n| col(n).ok_or_else(|| Error::InvalidArgument(format!("{}: missing column {n}", path.display()))))
        .collect::<Result<_>>()?;
    let label_idx = col(data::LABEL_COLUMN);
    let mut s = AnomalySeries {
        tau,
        combination,
        threshold,
        end_index: Vec::new(),
        recon: Vec::new(),
        prob: Vec::new(),
        grad: Vec::new(),
        combined: Vec::new(),
        predicted: Vec::new(),
        labels: label_idx.map(|_| Vec::new()),
        nfe: Vec::new(),
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let num = |i: usize, name: &str| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
                row: row + 1,
                column: name.into(),
                message: format!("{}: expected a number", path.display()),
            })
        };
        s.end_index.push(num(idx[0], "t")? as usize);
        s.recon.push(num(idx[1], "recon")?);
        s.prob.push(num(idx[2], "prob")?);
        s.grad.push(num(idx[3], "grad")?);
        s.combined.push(num(idx[4], "combined")?);
        s.predicted.push(num(idx[5], "predicted")? as u8);
        if let (Some(li), Some(labels)) = (label_idx, s.labels.as_mut()) {
            labels.push(num(li, data::LABEL_COLUMN)? as u8);
        }
        s.nfe.push(WindowNfe::default());
    }
    Ok(s)
}

/// Threshold sweep and F1 curve for the combined column and for every
/// combination mode.
pub fn evaluate(series: &AnomalySeries, cfg: &RunConfig) -> Result<EvalOutput> {
    let labels = series
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("anomaly series has no label column".into()))?;
    let sweep = |scores: &[f64]| -> Result<EvalResult> {
        let grid = eval::quantile_grid(scores, cfg.grid_size)?;
        Ok(eval::best_threshold_sweep(scores, labels, cfg.objective, Some(&grid))?.1)
    };
    let result = sweep(&series.combined)?;
    let modes = Combination::ALL
        .into_iter()
        .map(|c| {
            let scores = anomaly::combine_series(&series.recon, &series.prob, &series.grad, c);
            Ok(ModeSummary {
                combination: c,
                result: sweep(&scores)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalOutput { result, modes })
}

/// Evaluates an anomaly CSV and writes the curve and per-mode summary.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    let input = cfg.eval_input.clone().unwrap_or_else(|| cfg.out.join(ANOMALY_CSV));
    let series = read_anomaly_csv(&input)?;
    if series.labels.is_none() {
        return Err(Error::InvalidArgument(format!("{} has no label column", input.display())));
    }
    let out = evaluate(&series, cfg)?;
    ensure_dir(&cfg.out)?;
    let mut header = cfg.header();
    header.push(format!("input={} tau={} combination={}", input.display(), series.tau, series.combination.name()));
    out.result.write_csv(&cfg.out.join(EVAL_CSV), &header)?;
    let mut text: String = header.iter().map(|c| format!("# {c}\n")).collect();
    text.push_str("mode,f1,f1_pa,auc,threshold\n");
    for m in &out.modes {
        let r = &m.result;
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:e}\n",
            m.combination.name(),
            r.f1_plain,
            r.f1_pa,
            r.auc,
            r.threshold
        ));
    }
    let p = cfg.out.join(MODES_CSV);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

/// Mean NFE per stage over a scored series.
pub fn mean_nfe(nfe: &[WindowNfe]) -> [f64; 4] {
    let n = nfe.len().max(1) as f64;
    let sum = |f: fn(&WindowNfe) -> usize| nfe.iter().map(f).sum::<usize>() as f64 / n;
    [sum(|w| w.purify), sum(|w| w.recon), sum(|w| w.prob), sum(|w| w.grad)]
}
