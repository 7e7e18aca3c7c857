//! Python bindings over the core crate. Matrices cross the boundary as
//! row-major nested lists; experiment configs cross as TOML strings, the same
//! schema the CLI reads.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pointnorm_core::config::ExperimentConfig;
use pointnorm_core::dataset::load_csv as core_load_csv;
use pointnorm_core::engine::{grad_check as core_grad_check, Pipeline as CorePipeline};
use pointnorm_core::eval::{adf_stat as core_adf_stat, improvement_values, schwert_lag as core_schwert_lag};
use pointnorm_core::normalizers::param_count as core_param_count;
use pointnorm_core::runner::{build_pipeline, run_experiment as core_run_experiment};
use pointnorm_core::synth::{gen_piecewise, SynthConfig};
use pointnorm_core::{Error, Mat};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Row-major matrix as plain Python lists.
type Rows = Vec<Vec<f64>>;

fn mat_from_rows(rows: &[Vec<f64>]) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("matrix rows must be non-empty and rectangular"));
    }
    Ok(Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]))
}

fn rows_from_mat(m: &Mat) -> Rows {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Closed-form trainable-parameter count for a normalization method.
#[pyfunction]
#[pyo3(signature = (method, d, l, h, p_slice=None))]
fn param_count(method: &str, d: usize, l: usize, h: usize, p_slice: Option<usize>) -> PyResult<u64> {
    core_param_count(method, d, l, h, p_slice).map_err(py_err)
}

/// Augmented Dickey-Fuller t-statistic (constant-only regression).
#[pyfunction]
fn adf_stat(series: Vec<f64>, max_lag: usize) -> PyResult<f64> {
    core_adf_stat(&series, max_lag).map_err(py_err)
}

/// Schwert rule-of-thumb lag for a series of length n.
#[pyfunction]
fn schwert_lag(n: usize) -> usize {
    core_schwert_lag(n)
}

/// Mean MSE/MAE improvement of `ours` over `base`, in percent.
#[pyfunction]
fn improvement(base: Vec<f64>, ours: Vec<f64>) -> PyResult<f64> {
    improvement_values(&base, &ours).map_err(py_err)
}

/// Per-feature z-score of an L x D lookback; returns (normalized, mu, sigma).
#[pyfunction]
#[pyo3(signature = (x, eps=1e-5))]
fn zscore(x: Rows, eps: f64) -> PyResult<(Rows, Vec<f64>, Vec<f64>)> {
    let x = mat_from_rows(&x)?;
    if x.nrows() < 2 {
        return Err(PyValueError::new_err("z-score needs at least two rows"));
    }
    let (norm, ctx) = pointnorm_core::normalizers::zscore_normalize(&x, eps);
    Ok((rows_from_mat(&norm), ctx.mu_x.to_vec(), ctx.sigma_x.to_vec()))
}

/// Piecewise-stationary synthetic series as rows of feature values.
#[pyfunction]
#[pyo3(signature = (t_len=4096, d=4, regime_len_mean=32.0, mean_drift_scale=0.5,
                    var_drift_scale=0.0, ar_coeff=0.7, noise_std=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    t_len: usize,
    d: usize,
    regime_len_mean: f64,
    mean_drift_scale: f64,
    var_drift_scale: f64,
    ar_coeff: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<Rows> {
    let cfg = SynthConfig {
        t_len,
        d,
        regime_len_mean,
        mean_drift_scale,
        var_drift_scale,
        ar_coeff,
        noise_std,
        seed,
    };
    let frame = gen_piecewise(&cfg).map_err(py_err)?;
    Ok(rows_from_mat(&frame.values))
}

/// Load a CSV series; returns (feature_names, rows).
#[pyfunction]
#[pyo3(signature = (path, timestamp_column=false))]
fn load_csv(path: &str, timestamp_column: bool) -> PyResult<(Vec<String>, Rows)> {
    let frame = core_load_csv(path.as_ref(), timestamp_column).map_err(py_err)?;
    Ok((frame.feature_names.clone(), rows_from_mat(&frame.values)))
}

/// Run every seed of a TOML experiment config; returns report JSON strings.
#[pyfunction]
#[pyo3(signature = (config_toml, threads=1))]
fn run_experiment(config_toml: &str, threads: usize) -> PyResult<Vec<String>> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let reports = core_run_experiment(&cfg, threads).map_err(py_err)?;
    Ok(reports.iter().map(|r| r.to_json()).collect())
}

/// A normalizer + backbone pair built from a TOML experiment config.
#[pyclass]
struct Pipeline {
    inner: CorePipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config_toml, d, seed=0))]
    fn new(config_toml: &str, d: usize, seed: u64) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
        let inner = build_pipeline(&cfg, d, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn num_trainable(&self) -> usize {
        self.inner.num_trainable()
    }

    fn forward(&self, x: Rows) -> PyResult<Rows> {
        let x = mat_from_rows(&x)?;
        let (y_hat, _) = self.inner.forward(&x).map_err(py_err)?;
        Ok(rows_from_mat(&y_hat))
    }

    /// Central-difference gradient check on one (x, y) instance; returns
    /// (max_rel_err, worst_index, checked, total).
    #[pyo3(signature = (x, y, step=1e-5))]
    fn grad_check(
        &self,
        x: Rows,
        y: Rows,
        step: f64,
    ) -> PyResult<(f64, usize, usize, usize)> {
        let x = mat_from_rows(&x)?;
        let y = mat_from_rows(&y)?;
        let check = core_grad_check(&self.inner, &x, &y, step).map_err(py_err)?;
        Ok((check.max_rel_err, check.worst_index, check.checked, check.total))
    }
}

#[pymodule]
fn pointnorm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(adf_stat, m)?)?;
    m.add_function(wrap_pyfunction!(schwert_lag, m)?)?;
    m.add_function(wrap_pyfunction!(improvement, m)?)?;
    m.add_function(wrap_pyfunction!(zscore, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
