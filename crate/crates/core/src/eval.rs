//! Metrics, improvement percentages, the ADF stationarity diagnostic, and
//! the serializable run report.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub mse: f64,
    pub mae: f64,
    pub n_instances: usize,
}

/// MSE and MAE averaged over instances × horizon steps × features.
pub fn metrics(y_hat: &[Mat], y: &[Mat]) -> Result<MetricPair> {
    if y_hat.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    if y_hat.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} instances", y.len()),
            actual: format!("{} instances", y_hat.len()),
        });
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for (a, b) in y_hat.iter().zip(y.iter()) {
        if a.dim() != b.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", b.dim()),
                actual: format!("{:?}", a.dim()),
            });
        }
        for (p, t) in a.iter().zip(b.iter()) {
            let e = p - t;
            se += e * e;
            ae += e.abs();
            count += 1;
        }
    }
    Ok(MetricPair { mse: se / count as f64, mae: ae / count as f64, n_instances: y.len() })
}

/// Mean over horizons of (base − new)/base, in percent.
pub fn improvement_values(base: &[f64], new: &[f64]) -> Result<f64> {
    if base.is_empty() || base.len() != new.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} horizons", base.len().max(1)),
            actual: format!("{} horizons", new.len()),
        });
    }
    let mut total = 0.0;
    for (i, (b, n)) in base.iter().zip(new.iter()).enumerate() {
        if *b == 0.0 {
            return Err(Error::DivisionByZero(format!("improvement base[{i}]")));
        }
        total += (b - n) / b;
    }
    Ok(100.0 * total / base.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Improvement {
    pub mse_pct: f64,
    pub mae_pct: f64,
}

pub fn improvement(base: &[MetricPair], new: &[MetricPair]) -> Result<Improvement> {
    let col = |s: &[MetricPair], f: fn(&MetricPair) -> f64| s.iter().map(f).collect::<Vec<_>>();
    Ok(Improvement {
        mse_pct: improvement_values(&col(base, |m| m.mse), &col(new, |m| m.mse))?,
        mae_pct: improvement_values(&col(base, |m| m.mae), &col(new, |m| m.mae))?,
    })
}

/// Schwert's rule of thumb for the ADF lag order.
pub fn schwert_lag(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// OLS by normal equations. Returns coefficients and their standard errors.
pub(crate) fn ols_with_se(design: &Mat, target: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let (m, k) = design.dim();
    assert_eq!(m, target.len());
    if m <= k {
        return Err(Error::SingularRegression);
    }
    let xtx = design.t().dot(design);
    let xty = design.t().dot(target);
    let inv = invert(&xtx)?;
    let beta = inv.dot(&xty);
    let residual = target - &design.dot(&beta);
    let rss: f64 = residual.iter().map(|r| r * r).sum();
    let s2 = rss / (m - k) as f64;
    let se = Array1::from_shape_fn(k, |j| (s2 * inv[[j, j]]).sqrt());
    Ok((beta, se))
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &Mat) -> Result<Mat> {
    let k = a.nrows();
    let mut work = a.clone();
    let mut inv: Mat = Array2::eye(k);
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for col in 0..k {
        let pivot_row = (col..k)
            .max_by(|&i, &j| work[[i, col]].abs().total_cmp(&work[[j, col]].abs()))
            .unwrap();
        if work[[pivot_row, col]].abs() < 1e-12 * scale {
            return Err(Error::SingularRegression);
        }
        if pivot_row != col {
            for j in 0..k {
                work.swap([pivot_row, j], [col, j]);
                inv.swap([pivot_row, j], [col, j]);
            }
        }
        let pivot = work[[col, col]];
        for j in 0..k {
            work[[col, j]] /= pivot;
            inv[[col, j]] /= pivot;
        }
        for i in 0..k {
            if i == col {
                continue;
            }
            let factor = work[[i, col]];
            if factor == 0.0 {
                continue;
            }
            for j in 0..k {
                work[[i, j]] -= factor * work[[col, j]];
                inv[[i, j]] -= factor * inv[[col, j]];
            }
        }
    }
    Ok(inv)
}

/// Augmented Dickey-Fuller t-statistic, constant-only regression, fixed lag
/// order: Δy_t on [1, y_{t−1}, Δy_{t−1}, …, Δy_{t−p}]. More negative means
/// stronger evidence of stationarity.
pub fn adf_stat(series: &[f64], max_lag: usize) -> Result<f64> {
    let n = series.len();
    let p = max_lag;
    if n < p + 3 || n - 1 - p < p + 3 {
        return Err(Error::Config(format!(
            "adf needs more than {} observations for lag {p}, got {n}",
            2 * p + 4
        )));
    }
    let rows = n - 1 - p;
    let k = p + 2;
    let diff: Vec<f64> = (1..n).map(|t| series[t] - series[t - 1]).collect();
    // Center the level column: the slope t-stat is invariant (the intercept
    // absorbs the shift) and the normal equations stay well-conditioned.
    let level_mean = series.iter().sum::<f64>() / n as f64;
    let mut design = Array2::zeros((rows, k));
    let mut target = Array1::zeros(rows);
    for (r, t) in (p + 1..n).enumerate() {
        target[r] = diff[t - 1];
        design[[r, 0]] = 1.0;
        design[[r, 1]] = series[t - 1] - level_mean;
        for i in 1..=p {
            design[[r, 1 + i]] = diff[t - 1 - i];
        }
    }
    let (beta, se) = ols_with_se(&design, &target)?;
    if se[1] == 0.0 || !se[1].is_finite() {
        return Err(Error::SingularRegression);
    }
    Ok(beta[1] / se[1])
}

// ---------------------------------------------------------------------------
// Run report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub per_step_mse: Vec<f64>,
    pub per_step_mae: Vec<f64>,
    /// ADF statistic of each feature's training slice, Schwert lag; None
    /// where the regression was degenerate.
    pub adf_train_per_feature: Vec<Option<f64>>,
}

/// Everything one training-and-evaluation run produced. Field order is the
/// serialization order; `wall_time_s` is the only field two identical runs
/// may disagree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub lookback: usize,
    pub horizon: usize,
    /// True when there was no validation split and training was skipped.
    pub evaluation_only: bool,
    pub test_metrics: MetricPair,
    pub train_summary: Option<TrainSummary>,
    pub diagnostics: Option<Diagnostics>,
    pub caveats: Vec<String>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report parse: {e}")))
    }
}

/// FNV-1a 64-bit hex digest, used to fingerprint the config echo.
pub fn fnv1a_hex(text: &str) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}
