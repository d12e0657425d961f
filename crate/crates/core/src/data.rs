//! Multivariate time series: ingestion, scaling, windowing and synthesis.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Name of the optional ground-truth column in CSV files.
pub const LABEL_COLUMN: &str = "label";

/// A `T x m` matrix of observations with optional per-step 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Array2<f64>,
    labels: Option<Vec<u8>>,
    feature_names: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "time series needs at least one row and one column".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time series values".into()));
        }
        Ok(Self {
            values,
            labels: None,
            feature_names: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", self.len()),
                got: format!("{}", labels.len()),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature names", self.dim()),
                got: format!("{}", names.len()),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Feature dimension `m`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    fn map_values(&self, values: Array2<f64>) -> Self {
        Self {
            values,
            labels: self.labels.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// One sliding window: `target` holds rows `t-ω..=t`, `condition` the first
/// `ω` of them. `end_index` is the 1-based time index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub target: Array2<f64>,
    pub condition: Array2<f64>,
    pub end_index: usize,
}

impl Window {
    pub fn from_target(target: Array2<f64>, end_index: usize) -> Self {
        let omega = target.nrows() - 1;
        let condition = target.slice(s![..omega, ..]).to_owned();
        Self {
            target,
            condition,
            end_index,
        }
    }

    pub fn omega(&self) -> usize {
        self.condition.nrows()
    }
}

/// Per-feature min-max scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &TimeSeries) -> Self {
        let v = series.values();
        let (min, max) = v
            .columns()
            .into_iter()
            .map(|c| {
                c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
            })
            .unzip();
        Self { min, max }
    }

    fn check(&self, series: &TimeSeries) -> Result<()> {
        if series.dim() != self.min.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", self.min.len()),
                got: format!("{}", series.dim()),
            });
        }
        Ok(())
    }

    /// Maps each feature through `(x - min) / (max - min)`; constant features map to 0.
    pub fn apply(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check(series)?;
        let mut out = series.values.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let range = self.max[j] - self.min[j];
            if range > 0.0 {
                col.mapv_inplace(|x| (x - self.min[j]) / range);
            } else {
                col.fill(0.0);
            }
        }
        Ok(series.map_values(out))
    }

    pub fn invert(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check(series)?;
        let mut out = series.values.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let range = self.max[j] - self.min[j];
            col.mapv_inplace(|x| x * range + self.min[j]);
        }
        Ok(series.map_values(out))
    }

    /// One `feature,min,max` row per feature.
    pub fn write_csv(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut text: String = comments.iter().map(|c| format!("# {c}\n")).collect();
        text.push_str("feature,min,max\n");
        for (j, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            text.push_str(&format!("{j},{lo:e},{hi:e}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let (mut min, mut max) = (Vec::new(), Vec::new());
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let field = |i: usize, name: &str| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        row: row + 1,
                        column: name.into(),
                        message: format!("{}: expected a number", path.display()),
                    })
            };
            min.push(field(1, "min")?);
            max.push(field(2, "max")?);
        }
        if min.is_empty() {
            return Err(Error::InvalidArgument(format!("{} lists no features", path.display())));
        }
        Ok(Self { min, max })
    }
}

/// Fits a min-max scaler on `train` only and applies it to `train` and every
/// series in `others`.
pub fn fit_apply_scaler(
    train: &TimeSeries,
    others: &[TimeSeries],
) -> Result<(Scaler, TimeSeries, Vec<TimeSeries>)> {
    let scaler = Scaler::fit(train);
    let scaled_train = scaler.apply(train)?;
    let scaled_others = others
        .iter()
        .map(|s| scaler.apply(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((scaler, scaled_train, scaled_others))
}

/// All `T - ω` stride-1 windows of length `ω + 1`.
pub fn sliding_windows(series: &TimeSeries, omega: usize) -> Result<Vec<Window>> {
    if omega == 0 {
        return Err(Error::InvalidArgument("window offset ω must be ≥ 1".into()));
    }
    let t = series.len();
    if t < omega + 1 {
        return Err(Error::InvalidArgument(format!(
            "series of length {t} is shorter than one window (ω + 1 = {})",
            omega + 1
        )));
    }
    Ok((0..t - omega)
        .map(|j| window_at(series, omega, j))
        .collect())
}

/// The `j`-th window (0-based start row) without materialising the others.
pub fn window_at(series: &TimeSeries, omega: usize, start: usize) -> Window {
    let target = series
        .values
        .slice(s![start..start + omega + 1, ..])
        .to_owned();
    Window::from_target(target, start + omega + 1)
}

/// Number of windows available for a series of length `t`.
pub fn window_count(t: usize, omega: usize) -> usize {
    t.saturating_sub(omega)
}

/// Reads a CSV file with one header row. `label_column`, when given and
/// present in the header, is parsed as 0/1 labels; the other columns become
/// features. Lines starting with `#` are comments.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = label_column.and_then(|name| header.iter().position(|h| h == name));
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no feature columns",
            path.display()
        )));
    }

    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == label_idx {
                let y = match cell {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    other => {
                        return Err(Error::Parse {
                            row,
                            column: header[i].clone(),
                            message: format!("label {other:?} is not 0 or 1"),
                        })
                    }
                };
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: header[i].clone(),
                    message: format!("{cell:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: header[i].clone(),
                        message: format!("{cell:?} is not finite"),
                    });
                }
                flat.push(v);
            }
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, names.len()), flat)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut series = TimeSeries::new(values)?.with_feature_names(names)?;
    if label_idx.is_some() {
        series = series.with_labels(labels)?;
    }
    Ok(series)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        row,
        column: "*".into(),
        message: format!("{}: {e}", path.display()),
    }
}

/// Writes the series as CSV (features, then `label` if present), preceded by
/// `#`-prefixed comment lines.
pub fn write_csv(series: &TimeSeries, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for c in comments {
        writeln!(w, "# {c}").map_err(io)?;
    }
    let names: Vec<String> = match series.feature_names() {
        Some(n) => n.to_vec(),
        None => (0..series.dim()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = names.join(",");
    if series.labels().is_some() {
        header.push(',');
        header.push_str(LABEL_COLUMN);
    }
    writeln!(w, "{header}").map_err(io)?;
    for (t, row) in series.values().rows().into_iter().enumerate() {
        let mut line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(labels) = series.labels() {
            line.push_str(&format!(",{}", labels[t]));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseProcess {
    IidGaussian,
    /// Unit-variance stationary AR(1) with the given lag coefficient.
    Ar1(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Single-step additive spikes.
    Spike,
    /// Additive shifts held for [`LEVEL_SHIFT_LEN`] steps.
    LevelShift,
}

pub const LEVEL_SHIFT_LEN: usize = 10;

/// Recipe for a synthetic labelled series.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub dim: usize,
    pub base: BaseProcess,
    pub anomaly: AnomalyKind,
    /// Anomaly size in units of the (unit) process standard deviation.
    pub magnitude: f64,
    /// Expected fraction of anomalous time steps.
    pub rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("length and dim must be positive".into()));
        }
        if let BaseProcess::Ar1(phi) = self.base {
            if !(phi.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!("|φ| = {} must be < 1", phi.abs())));
            }
        }
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("rate {} outside [0, 1)", self.rate)));
        }
        if !(self.magnitude > 0.0) {
            return Err(Error::InvalidArgument("magnitude must be positive".into()));
        }
        Ok(())
    }
}

/// The clean base process for `spec`, before any anomaly is injected.
pub fn generate_clean(spec: &SynthSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let (t_len, m) = (spec.length, spec.dim);
    let mut values = Array2::<f64>::zeros((t_len, m));
    match spec.base {
        BaseProcess::IidGaussian => {
            values.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        }
        BaseProcess::Ar1(phi) => {
            let innov = (1.0 - phi * phi).sqrt();
            for j in 0..m {
                values[[0, j]] = StandardNormal.sample(&mut rng);
            }
            for t in 1..t_len {
                for j in 0..m {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    values[[t, j]] = phi * values[[t - 1, j]] + innov * e;
                }
            }
        }
    }
    Ok(values)
}

/// Generates the base process, then injects anomalies and labels exactly the
/// perturbed steps. Equal specs produce bit-identical series.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<TimeSeries> {
    let mut values = generate_clean(spec)?;
    let mut rng = rng::stream(spec.seed, Stream::Evaluation);
    let (t_len, m) = (spec.length, spec.dim);
    let mut labels = vec![0u8; t_len];
    match spec.anomaly {
        AnomalyKind::Spike => {
            for t in 0..t_len {
                if rng.random::<f64>() < spec.rate {
                    labels[t] = 1;
                    for j in 0..m {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        values[[t, j]] += sign * spec.magnitude;
                    }
                }
            }
        }
        AnomalyKind::LevelShift => {
            let onset_rate = spec.rate / LEVEL_SHIFT_LEN as f64;
            let mut t = 0;
            while t < t_len {
                if rng.random::<f64>() < onset_rate {
                    let signs: Vec<f64> = (0..m)
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect();
                    let end = (t + LEVEL_SHIFT_LEN).min(t_len);
                    for u in t..end {
                        labels[u] = 1;
                        for j in 0..m {
                            values[[u, j]] += signs[j] * spec.magnitude;
                        }
                    }
                    t = end;
                } else {
                    t += 1;
                }
            }
        }
    }
    TimeSeries::new(values)?
        .with_feature_names((0..m).map(|j| format!("x{j}")).collect())?
        .with_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_plain_csv() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let ts = load_csv(f.path(), Some(LABEL_COLUMN)).unwrap();
        assert_eq!((ts.len(), ts.dim()), (3, 2));
        assert_eq!(ts.values(), array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert!(ts.labels().is_none());
    }

    #[test]
    fn load_labelled_csv() {
        let f = write_tmp("a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let ts = load_csv(f.path(), Some(LABEL_COLUMN)).unwrap();
        assert_eq!(ts.dim(), 2);
        assert_eq!(ts.labels().unwrap(), &[0, 1, 0]);
    }

    #[test]
    fn load_reports_bad_cell_row() {
        let f = write_tmp("a,b\n1,2\nabc,4\n5,6\n");
        match load_csv(f.path(), None) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_label_and_missing_file() {
        let f = write_tmp("a,label\n1,2\n");
        assert!(matches!(load_csv(f.path(), Some("label")), Err(Error::Parse { .. })));
        assert!(matches!(
            load_csv("/definitely/not/here.csv", None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn scaler_conventions() {
        let train = TimeSeries::new(array![[0.0, 3.0], [5.0, 3.0], [10.0, 3.0]]).unwrap();
        let test = TimeSeries::new(array![[20.0, 7.0]]).unwrap();
        let (scaler, tr, others) = fit_apply_scaler(&train, &[test]).unwrap();
        assert_eq!(tr.values().column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(tr.values().column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(others[0].values()[[0, 0]], 2.0);
        let back = scaler.invert(&tr).unwrap();
        assert_eq!(back.values().column(0), train.values().column(0));
    }

    #[test]
    fn scaler_file_round_trip() {
        let scaler = Scaler {
            min: vec![-1.25, 0.1 + 0.2],
            max: vec![3.0, 7.7],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaler.csv");
        scaler.write_csv(&p, &["seed=1".into()]).unwrap();
        assert_eq!(Scaler::load(&p).unwrap(), scaler);
        std::fs::write(&p, "feature,min,max\n0,a,1\n").unwrap();
        assert!(matches!(Scaler::load(&p), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn window_counts() {
        let ts = TimeSeries::new(Array2::zeros((12, 2))).unwrap();
        assert_eq!(sliding_windows(&ts, 10).unwrap().len(), 2);
        let ts = TimeSeries::new(Array2::from_shape_fn((11, 1), |(i, _)| i as f64)).unwrap();
        let w = sliding_windows(&ts, 10).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target.column(0).to_vec(), (0..11).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(w[0].end_index, 11);
        let ts = TimeSeries::new(Array2::zeros((10, 2))).unwrap();
        assert!(sliding_windows(&ts, 10).is_err());
    }

    #[test]
    fn zero_rate_has_no_labels() {
        let spec = SynthSpec {
            length: 500,
            dim: 2,
            base: BaseProcess::Ar1(0.5),
            anomaly: AnomalyKind::Spike,
            magnitude: 5.0,
            rate: 0.0,
            seed: 1,
        };
        let ts = generate_synthetic(&spec).unwrap();
        assert!(ts.labels().unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn ar1_autocorrelation() {
        let spec = SynthSpec {
            length: 10_000,
            dim: 1,
            base: BaseProcess::Ar1(0.9),
            anomaly: AnomalyKind::Spike,
            magnitude: 5.0,
            rate: 0.0,
            seed: 3,
        };
        let v = generate_clean(&spec).unwrap();
        let x: Vec<f64> = v.column(0).to_vec();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|a| (a - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!((rho - 0.9).abs() < 0.02, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn spike_label_count_is_binomial() {
        let spec = SynthSpec {
            length: 2000,
            dim: 2,
            base: BaseProcess::Ar1(0.9),
            anomaly: AnomalyKind::Spike,
            magnitude: 5.0,
            rate: 0.05,
            seed: 11,
        };
        let ts = generate_synthetic(&spec).unwrap();
        let n: usize = ts.labels().unwrap().iter().map(|&y| y as usize).sum();
        // mean 100, sd ≈ 9.7
        assert!((70..=130).contains(&n), "label count {n}");
        assert_eq!(ts, generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn level_shift_labels_match_perturbation() {
        let spec = SynthSpec {
            length: 1000,
            dim: 1,
            base: BaseProcess::IidGaussian,
            anomaly: AnomalyKind::LevelShift,
            magnitude: 4.0,
            rate: 0.1,
            seed: 5,
        };
        let clean = generate_clean(&spec).unwrap();
        let ts = generate_synthetic(&spec).unwrap();
        for t in 0..spec.length {
            let moved = (ts.values()[[t, 0]] - clean[[t, 0]]).abs() > 1e-12;
            assert_eq!(moved, ts.labels().unwrap()[t] == 1);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SynthSpec {
            length: 10,
            dim: 1,
            base: BaseProcess::Ar1(1.0),
            anomaly: AnomalyKind::Spike,
            magnitude: 1.0,
            rate: 0.1,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        spec.base = BaseProcess::IidGaussian;
        spec.rate = 1.0;
        assert!(spec.validate().is_err());
        spec.rate = 0.1;
        spec.magnitude = 0.0;
        assert!(spec.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_count_is_t_minus_omega(t in 2usize..60, omega in 1usize..20) {
                prop_assume!(t > omega);
                let ts = TimeSeries::new(Array2::zeros((t, 1))).unwrap();
                prop_assert_eq!(sliding_windows(&ts, omega).unwrap().len(), t - omega);
            }

            #[test]
            fn scaler_round_trip(rows in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
                let flat: Vec<f64> = rows.iter().flat_map(|&(a, b)| [a, b]).collect();
                let ts = TimeSeries::new(Array2::from_shape_vec((rows.len(), 2), flat).unwrap()).unwrap();
                let sc = Scaler::fit(&ts);
                let back = sc.invert(&sc.apply(&ts).unwrap()).unwrap();
                for j in 0..2 {
                    if sc.max[j] > sc.min[j] {
                        for t in 0..ts.len() {
                            prop_assert!((back.values()[[t, j]] - ts.values()[[t, j]]).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
