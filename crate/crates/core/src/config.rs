//! Run configuration: a line-oriented `key = value` file with dotted keys,
//! `#` comments and command-line overrides.
//!
//! ```text
//! # model
//! window.omega = 10
//! train.n_iter = 2000
//! detect.combination = RPG
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::anomaly::{Combination, DetectorConfig};
use crate::data::{AnomalyKind, BaseProcess, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::Objective;
use crate::nn::ScoreNetConfig;
use crate::ode::{Method, SolverConfig};
use crate::sampler::{TraceEstimator, TraceMode};
use crate::sde::SdeSchedule;
use crate::train::TrainConfig;

/// Line number recorded for values set on the command line or missing.
pub const OVERRIDE_LINE: usize = 0;

/// Raw `key -> (value, line)` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            map.entries.insert(k, (v, i + 1));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair).ok_or_else(|| Error::Config {
            line: OVERRIDE_LINE,
            message: format!("override {pair:?} is not `key=value`"),
        })?;
        self.entries.insert(k, (v, OVERRIDE_LINE));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(OVERRIDE_LINE, |e| e.1)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: self.line(key),
                message: format!("{key}: cannot parse {v:?}: {e}"),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn invalid(&self, key: &str, message: impl Display) -> Error {
        Error::Config {
            line: self.line(key),
            message: format!("{key}: {message}"),
        }
    }

    /// Like [`invalid`](Self::invalid), blaming the first of `keys` that is set.
    fn invalid_any(&self, keys: &[&str], message: impl Display) -> Error {
        let key = keys.iter().find(|k| self.get(k).is_some()).unwrap_or(&keys[0]);
        self.invalid(key, message)
    }

    /// Canonical `key=value` lines, sorted by key, without the keys that
    /// cannot change results (`out`, `workers`).
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "out" | "workers"))
            .map(|(k, (v, _))| format!("{k}={v}\n"))
            .collect()
    }
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() || k.contains(char::is_whitespace) {
        return None;
    }
    let v = v.split(" #").next().unwrap_or("").trim();
    Some((k.to_string(), v.to_string()))
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "workers",
    "out",
    "data.train",
    "data.test",
    "data.label_column",
    "window.omega",
    "model.n_layer",
    "model.n_resnet",
    "model.channel_width",
    "model.time_embed_dim",
    "sde.beta_min",
    "sde.beta_max",
    "sde.t_eps",
    "train.n_iter",
    "train.batch_size",
    "train.learning_rate",
    "train.grad_clip_norm",
    "train.checkpoint_every",
    "solver.method",
    "solver.rtol",
    "solver.atol",
    "solver.max_steps",
    "trace.mode",
    "trace.n_probes",
    "detect.checkpoint",
    "detect.tau",
    "detect.combination",
    "detect.threshold",
    "detect.threshold_percentile",
    "detect.calibration_windows",
    "eval.input",
    "eval.objective",
    "eval.grid_size",
    "synth.train_length",
    "synth.test_length",
    "synth.dim",
    "synth.base",
    "synth.phi",
    "synth.kind",
    "synth.magnitude",
    "synth.rate",
];

/// How the detection threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Percentile of the combined score over training windows.
    TrainPercentile(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub train_length: usize,
    pub test_length: usize,
    pub dim: usize,
    pub base: BaseProcess,
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub rate: f64,
}

impl SynthSettings {
    /// Clean training series and labelled test series, seeded from `seed`.
    pub fn specs(&self, seed: u64) -> (SynthSpec, SynthSpec) {
        let train = SynthSpec {
            length: self.train_length,
            dim: self.dim,
            base: self.base,
            anomaly: self.kind,
            magnitude: self.magnitude,
            rate: 0.0,
            seed,
        };
        let test = SynthSpec {
            length: self.test_length,
            rate: self.rate,
            seed: seed.wrapping_add(1),
            ..train.clone()
        };
        (train, test)
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_column: String,
    pub net: ScoreNetConfig,
    pub schedule: SdeSchedule,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub threshold: ThresholdPolicy,
    pub calibration_windows: usize,
    pub checkpoint: Option<PathBuf>,
    pub eval_input: Option<PathBuf>,
    pub objective: Objective,
    pub grid_size: usize,
    pub synth: SynthSettings,
    /// Hex SHA-256 of the canonical entries.
    pub hash: String,
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(map.invalid(k, "unknown key"));
        }
        let seed: u64 = map.or("seed", 0)?;
        let omega: usize = map.or("window.omega", 10)?;
        let defaults = ScoreNetConfig::new(omega, 1);
        let net = ScoreNetConfig {
            n_layer: map.or("model.n_layer", defaults.n_layer)?,
            n_resnet: map.or("model.n_resnet", defaults.n_resnet)?,
            channel_width: map.or("model.channel_width", defaults.channel_width)?,
            time_embed_dim: map.or("model.time_embed_dim", defaults.time_embed_dim)?,
            seed,
            ..defaults
        };
        if omega == 0 {
            return Err(map.invalid("window.omega", "must be ≥ 1"));
        }
        net.validate().map_err(|e| map.invalid("model", e))?;

        let sd = SdeSchedule::default();
        let schedule = SdeSchedule::new(
            map.or("sde.beta_min", sd.beta_min)?,
            map.or("sde.beta_max", sd.beta_max)?,
            map.or("sde.t_eps", sd.t_eps)?,
        )
        .map_err(|e| map.invalid("sde", e))?;

        let td = TrainConfig::default();
        let train = TrainConfig {
            n_iter: map.or("train.n_iter", td.n_iter)?,
            batch_size: map.or("train.batch_size", td.batch_size)?,
            learning_rate: map.or("train.learning_rate", td.learning_rate)?,
            grad_clip_norm: map.or("train.grad_clip_norm", td.grad_clip_norm)?,
            checkpoint_every: map.or("train.checkpoint_every", td.checkpoint_every)?,
            seed,
            ..td
        };
        train.validate().map_err(|e| map.invalid("train", e))?;

        let solver = SolverConfig {
            method: map.or("solver.method", Method::Rk45)?,
            rtol: map.or("solver.rtol", 1e-3)?,
            atol: map.or("solver.atol", 1e-3)?,
            max_steps: map.or("solver.max_steps", SolverConfig::default().max_steps)?,
        };
        solver
            .validate()
            .map_err(|e| map.invalid_any(&["solver.rtol", "solver.atol", "solver.max_steps"], e))?;

        let estimator = match map.get("trace.mode").unwrap_or("exact") {
            "exact" => TraceEstimator::exact(),
            "hutchinson" => TraceEstimator {
                mode: TraceMode::Hutchinson {
                    n_probes: map.or("trace.n_probes", 1)?,
                },
                seed,
            },
            other => return Err(map.invalid("trace.mode", format!("expected exact or hutchinson, got {other:?}"))),
        };
        estimator.validate().map_err(|e| map.invalid("trace.n_probes", e))?;

        let rate: f64 = map.or("synth.rate", 0.05)?;
        let threshold = match map.parsed::<f64>("detect.threshold")? {
            Some(d) => ThresholdPolicy::Fixed(d),
            None => {
                let pct = map.or("detect.threshold_percentile", 100.0 * (1.0 - rate))?;
                if !(0.0..=100.0).contains(&pct) {
                    return Err(map.invalid("detect.threshold_percentile", "outside [0, 100]"));
                }
                ThresholdPolicy::TrainPercentile(pct)
            }
        };
        let workers: usize = map.or("workers", 0)?;
        let detector = DetectorConfig {
            tau: map.or("detect.tau", 0.1)?,
            combination: map.or("detect.combination", Combination::RPG)?,
            threshold: match threshold {
                ThresholdPolicy::Fixed(d) => d,
                ThresholdPolicy::TrainPercentile(_) => f64::INFINITY,
            },
            solver,
            estimator,
            seed,
            workers,
        };
        detector
            .validate()
            .map_err(|e| map.invalid(if detector.threshold.is_nan() { "detect.threshold" } else { "detect.tau" }, e))?;

        let base = match map.get("synth.base").unwrap_or("ar1") {
            "iid" | "iid-gaussian" => BaseProcess::IidGaussian,
            "ar1" => BaseProcess::Ar1(map.or("synth.phi", 0.8)?),
            other => return Err(map.invalid("synth.base", format!("expected iid or ar1, got {other:?}"))),
        };
        let kind = match map.get("synth.kind").unwrap_or("spike") {
            "spike" => AnomalyKind::Spike,
            "level-shift" | "level_shift" => AnomalyKind::LevelShift,
            other => return Err(map.invalid("synth.kind", format!("expected spike or level-shift, got {other:?}"))),
        };
        let synth = SynthSettings {
            train_length: map.or("synth.train_length", 2000)?,
            test_length: map.or("synth.test_length", 2000)?,
            dim: map.or("synth.dim", 2)?,
            base,
            kind,
            magnitude: map.or("synth.magnitude", 5.0)?,
            rate,
        };
        for spec in [synth.specs(seed).0, synth.specs(seed).1] {
            spec.validate().map_err(|e| map.invalid("synth", e))?;
        }

        let grid_size: usize = map.or("eval.grid_size", 100)?;
        if grid_size < 2 {
            return Err(map.invalid("eval.grid_size", "must be ≥ 2"));
        }
        let path = |k: &str| map.get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        Ok(RunConfig {
            seed,
            workers,
            out: path("out").unwrap_or_else(|| PathBuf::from("out")),
            train_path: path("data.train"),
            test_path: path("data.test"),
            label_column: map.get("data.label_column").unwrap_or(crate::data::LABEL_COLUMN).to_string(),
            net,
            schedule,
            train,
            detector,
            threshold,
            calibration_windows: map.or("detect.calibration_windows", 200)?,
            checkpoint: path("detect.checkpoint"),
            eval_input: path("eval.input"),
            objective: map.or("eval.objective", Objective::F1Pa)?,
            grid_size,
            synth,
            hash: config_hash(map),
        })
    }

    /// Reads the optional config file and applies overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = match path {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::default(),
        };
        for o in overrides {
            map.set(o)?;
        }
        Self::from_map(&map)
    }

    /// Header comment lines recorded in every output file.
    pub fn header(&self) -> Vec<String> {
        vec![format!("config_hash={} seed={}", self.hash, self.seed)]
    }

    /// Fails with the key's line number unless `key`'s path exists.
    pub fn require_existing(map_key: &str, path: Option<&Path>) -> Result<PathBuf> {
        match path {
            None => Err(Error::Config {
                line: OVERRIDE_LINE,
                message: format!("{map_key} is required"),
            }),
            Some(p) if !p.exists() => Err(Error::Config {
                line: OVERRIDE_LINE,
                message: format!("{map_key}: {} does not exist", p.display()),
            }),
            Some(p) => Ok(p.to_path_buf()),
        }
    }
}

/// Hex SHA-256 of the canonical form, truncated to 16 digits.
pub fn config_hash(map: &ConfigMap) -> String {
    let digest = Sha256::digest(map.canonical().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
