//! CSV loading, train-split standardization and sliding-window enumeration.
//!
//! The loader targets the layout shared by the common forecasting benchmarks:
//! comma-separated, optional header row (auto-detected by a non-numeric first
//! row), optional leading timestamp column. Splits are contiguous 7:1:2 by
//! default and each split is windowed independently, so no instance straddles
//! a split boundary.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::Mat;

/// Raw multivariate series, rows are time steps.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    pub values: Mat,
    pub feature_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl SeriesFrame {
    pub fn new(values: Mat, feature_names: Vec<String>, timestamps: Option<Vec<String>>) -> Self {
        debug_assert_eq!(values.ncols(), feature_names.len());
        SeriesFrame { values, feature_names, timestamps }
    }

    pub fn from_values(values: Mat) -> Self {
        let names = (0..values.ncols()).map(|k| format!("f{k}")).collect();
        SeriesFrame { values, feature_names: names, timestamps: None }
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    /// Keep only the first `k` features. Used for the reduced Traffic/ECL
    /// style configurations; a `k` of zero or ≥ D is a no-op.
    pub fn truncate_features(&mut self, k: usize) {
        if k == 0 || k >= self.num_features() {
            return;
        }
        self.values = self.values.slice(ndarray::s![.., ..k]).to_owned();
        self.feature_names.truncate(k);
    }
}

/// Per-feature location/scale fitted on the training split.
#[derive(Debug, Clone)]
pub struct StandardStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Half-open row intervals, contiguous and ordered train < val < test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// One training sample: lookback x (L×D) and horizon y (H×D).
#[derive(Debug, Clone)]
pub struct InstancePair {
    pub x: Mat,
    pub y: Mat,
    pub origin_index: usize,
}

/// Load a CSV series. With `has_timestamp_column` the first column is kept as
/// strings; everything else must parse as a real number. A header row is
/// detected by the first row failing numeric parsing in its value columns.
pub fn load_csv(path: &Path, has_timestamp_column: bool) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    let mut feature_names: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    let value_start = usize::from(has_timestamp_column);

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue; // trailing blank line
        }
        if let Some(w) = width {
            if record.len() != w {
                return Err(Error::Parse {
                    row: row_idx + 1,
                    col: record.len(),
                    detail: format!("expected {w} columns, found {}", record.len()),
                });
            }
        }

        let is_first = width.is_none();
        let numeric: Vec<Option<f64>> = record
            .iter()
            .skip(value_start)
            .map(|cell| cell.trim().parse::<f64>().ok())
            .collect();

        if is_first {
            width = Some(record.len());
            if record.len() <= value_start {
                return Err(Error::Parse {
                    row: 1,
                    col: record.len(),
                    detail: "no value columns".into(),
                });
            }
            if numeric.iter().any(|v| v.is_none()) {
                // Header row.
                feature_names = record.iter().skip(value_start).map(str::to_owned).collect();
                continue;
            }
            feature_names = (0..record.len() - value_start).map(|k| format!("f{k}")).collect();
        }

        let mut parsed = Vec::with_capacity(numeric.len());
        for (j, v) in numeric.iter().enumerate() {
            match v {
                Some(x) if x.is_finite() => parsed.push(*x),
                _ => {
                    return Err(Error::Parse {
                        row: row_idx + 1,
                        col: value_start + j + 1,
                        detail: format!("cannot parse `{}` as a number", &record[value_start + j]),
                    })
                }
            }
        }
        if has_timestamp_column {
            timestamps.push(record[0].to_owned());
        }
        rows.push(parsed);
    }

    if rows.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let d = rows[0].len();
    let mut values = Array2::zeros((rows.len(), d));
    for (t, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            values[[t, k]] = *v;
        }
    }
    let timestamps = has_timestamp_column.then_some(timestamps);
    Ok(SeriesFrame::new(values, feature_names, timestamps))
}

/// Contiguous split with train = floor(r0·T), val = floor(r1·T) and test the
/// remainder.
pub fn make_split(t_total: usize, ratios: (f64, f64, f64)) -> Result<SplitSpec> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if r0 + r1 + r2 > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split ratios sum to {} > 1",
            r0 + r1 + r2
        )));
    }
    let n_train = (r0 * t_total as f64).floor() as usize;
    let n_val = (r1 * t_total as f64).floor() as usize;
    if n_train + n_val > t_total {
        return Err(Error::TooShort { needed: n_train + n_val, actual: t_total });
    }
    Ok(SplitSpec {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..t_total,
    })
}

/// Mean and sample std (denominator n−1) over the training rows only.
pub fn fit_standardizer(frame: &SeriesFrame, split: &SplitSpec) -> Result<StandardStats> {
    let n = split.train.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, actual: n });
    }
    let train = frame.values.slice(ndarray::s![split.train.clone(), ..]);
    let mean = train.mean_axis(Axis(0)).expect("nonempty train split");
    let mut std = Array1::zeros(frame.num_features());
    for k in 0..frame.num_features() {
        let col = train.column(k);
        let ss: f64 = col.iter().map(|v| (v - mean[k]).powi(2)).sum();
        std[k] = (ss / (n - 1) as f64).sqrt();
    }
    if let Some(k) = std.iter().position(|s| *s < 1e-12) {
        return Err(Error::DegenerateFeature(k));
    }
    Ok(StandardStats { mean, std })
}

/// Standardize the entire frame, val/test included, with the given stats.
pub fn apply_standardizer(frame: &SeriesFrame, stats: &StandardStats) -> Result<SeriesFrame> {
    if stats.mean.len() != frame.num_features() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", frame.num_features()),
            actual: format!("{} stats entries", stats.mean.len()),
        });
    }
    let mut values = frame.values.clone();
    for k in 0..frame.num_features() {
        let mut col = values.column_mut(k);
        col.mapv_inplace(|v| (v - stats.mean[k]) / stats.std[k]);
    }
    Ok(SeriesFrame::new(values, frame.feature_names.clone(), frame.timestamps.clone()))
}

/// Enumerate lookback/horizon pairs inside `range` with the given stride.
/// Windows never read outside the range.
pub fn windows(
    frame: &SeriesFrame,
    range: &Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<InstancePair>> {
    if lookback < 2 {
        return Err(Error::Config("lookback must be at least 2".into()));
    }
    if horizon < 1 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if stride < 1 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let len = range.len();
    if len < lookback + horizon {
        return Err(Error::TooShort { needed: lookback + horizon, actual: len });
    }
    let count = (len - lookback - horizon) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = range.start + i * stride;
        let x = frame.values.slice(ndarray::s![s..s + lookback, ..]).to_owned();
        let y = frame
            .values
            .slice(ndarray::s![s + lookback..s + lookback + horizon, ..])
            .to_owned();
        out.push(InstancePair { x, y, origin_index: s });
    }
    Ok(out)
}

/// Write a frame back to CSV in the loader's format (header row, optional
/// timestamp column).
pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    if frame.timestamps.is_some() {
        header.push("date".to_owned());
    }
    header.extend(frame.feature_names.iter().cloned());
    writer.write_record(&header)?;
    for t in 0..frame.len() {
        let mut record = Vec::with_capacity(frame.num_features() + 1);
        if let Some(ts) = &frame.timestamps {
            record.push(ts[t].clone());
        }
        record.extend(frame.values.row(t).iter().map(|v| format!("{v}")));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Default location of the ETT-small hourly file used by the real-data tests.
pub fn ett_data_path() -> std::path::PathBuf {
    if let Ok(dir) = std::env::var("POINTNORM_DATA") {
        return std::path::Path::new(&dir).join("ETTh1.csv");
    }
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    manifest.join("../../data/ETTh1.csv")
}
