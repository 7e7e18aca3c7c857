//! Drive one configured experiment end to end: load or generate data, build
//! the pipeline per seed, train, evaluate, and write report artifacts.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{
    apply_standardizer, ett_data_path, fit_standardizer, load_csv, make_split, windows,
    InstancePair, SeriesFrame,
};
use crate::engine::{predict_set, train, Pipeline, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::eval::{
    adf_stat, fnv1a_hex, metrics, schwert_lag, Diagnostics, RunReport, TrainSummary,
};
use crate::synth::gen_piecewise;
use crate::Mat;

/// Decorrelates the backbone-init stream from the shuffle stream, which is
/// seeded with the run seed directly.
const BACKBONE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Windowed, standardized data ready for training.
pub struct PreparedData {
    pub train: Vec<InstancePair>,
    pub val: Vec<InstancePair>,
    pub test: Vec<InstancePair>,
    pub d: usize,
    /// Standardized training slice, for stationarity diagnostics.
    pub train_slice: Mat,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SeriesFrame> {
    let mut frame = match &cfg.dataset {
        DatasetConfig::Csv { path, timestamp_column } => load_csv(path, *timestamp_column)?,
        DatasetConfig::Synth { synth } => gen_piecewise(synth)?,
        DatasetConfig::Builtin { name } => {
            assert_eq!(name, "etth1", "validated by config");
            let path = ett_data_path();
            if !path.exists() {
                return Err(Error::Config(format!(
                    "dataset.name: etth1 expects a CSV at {} (see data/README.md)",
                    path.display()
                )));
            }
            load_csv(&path, true)?
        }
    };
    frame.truncate_features(cfg.max_features);
    Ok(frame)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let frame = load_dataset(cfg)?;
    let lookback = cfg.resolved_lookback()?;
    let split = make_split(frame.len(), cfg.split)?;
    let stats = fit_standardizer(&frame, &split)?;
    let frame = apply_standardizer(&frame, &stats)?;

    let train = windows(&frame, &split.train, lookback, cfg.horizon, cfg.stride)?;
    // A missing or too-short validation span degrades to evaluation-only
    // mode rather than failing the run.
    let val = match windows(&frame, &split.val, lookback, cfg.horizon, cfg.stride) {
        Ok(w) => w,
        Err(Error::TooShort { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let test = windows(&frame, &split.test, lookback, cfg.horizon, cfg.stride)?;

    let d = frame.num_features();
    let rows = split.train.len();
    let mut train_slice = Array2::zeros((rows, d));
    for (r, t) in split.train.clone().enumerate() {
        for k in 0..d {
            train_slice[[r, k]] = frame.values[[t, k]];
        }
    }
    Ok(PreparedData { train, val, test, d, train_slice })
}

pub fn build_pipeline(cfg: &ExperimentConfig, d: usize, seed: u64) -> Result<Pipeline> {
    let lookback = cfg.resolved_lookback()?;
    let normalizer = cfg.normalizer.build(lookback, cfg.horizon, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BACKBONE_SEED_SALT);
    let backbone = cfg.backbone.build(lookback, cfg.horizon, d, &mut rng);
    Ok(Pipeline::new(normalizer, backbone, cfg.normalizer.eps))
}

fn per_step_residuals(preds: &[Mat], truth: &[InstancePair]) -> (Vec<f64>, Vec<f64>) {
    let h = preds[0].nrows();
    let d = preds[0].ncols();
    let mut mse = vec![0.0; h];
    let mut mae = vec![0.0; h];
    for (p, inst) in preds.iter().zip(truth.iter()) {
        for n in 0..h {
            for k in 0..d {
                let e = p[[n, k]] - inst.y[[n, k]];
                mse[n] += e * e;
                mae[n] += e.abs();
            }
        }
    }
    let denom = (preds.len() * d) as f64;
    mse.iter_mut().for_each(|v| *v /= denom);
    mae.iter_mut().for_each(|v| *v /= denom);
    (mse, mae)
}

fn train_series_adf(train_slice: &Mat) -> Vec<Option<f64>> {
    let lag = schwert_lag(train_slice.nrows());
    (0..train_slice.ncols())
        .map(|k| {
            let col: Vec<f64> = train_slice.column(k).to_vec();
            adf_stat(&col, lag).ok()
        })
        .collect()
}

/// Train and evaluate one seed. Pure apart from wall-clock measurement.
pub fn run_single(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let mut pipe = build_pipeline(cfg, data.d, seed)?;
    let mut caveats = Vec::new();

    let evaluation_only = data.val.is_empty();
    let history: Option<TrainHistory> = if evaluation_only {
        caveats.push(
            "no validation windows: training skipped, parameters are the initialization".into(),
        );
        None
    } else {
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        Some(train(&mut pipe, &data.train, &data.val, &train_cfg)?)
    };

    if matches!(cfg.backbone.kind, crate::backbones::BackboneKind::DLinear)
        && !matches!(cfg.dataset, DatasetConfig::Synth { .. })
    {
        caveats.push(
            "dlinear backbone is a compact decomposition-linear stand-in; real-data numbers \
             are band checks, not exact reproductions"
                .into(),
        );
    }

    let preds = predict_set(&pipe, &data.test)?;
    let targets: Vec<Mat> = data.test.iter().map(|p| p.y.clone()).collect();
    let test_metrics = metrics(&preds, &targets)?;
    let (per_step_mse, per_step_mae) = per_step_residuals(&preds, &data.test);

    let config_value = cfg.to_json_value();
    let config_hash = fnv1a_hex(&config_value.to_string());
    Ok(RunReport {
        config: config_value,
        config_hash,
        seed,
        lookback: cfg.resolved_lookback()?,
        horizon: cfg.horizon,
        evaluation_only,
        test_metrics,
        train_summary: history.map(|h| TrainSummary {
            epochs: h.train_loss.len(),
            best_epoch: h.best_epoch,
            best_val_mse: h.val_loss[h.best_epoch],
        }),
        diagnostics: Some(Diagnostics {
            per_step_mse,
            per_step_mae,
            adf_train_per_feature: train_series_adf(&data.train_slice),
        }),
        caveats,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Run every configured seed. `threads > 1` runs seeds concurrently; report
/// order still follows the seed list.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            cfg.seeds
                .par_iter()
                .map(|&seed| run_single(cfg, &data, seed))
                .collect::<Result<Vec<_>>>()
        })
    } else {
        cfg.seeds.iter().map(|&seed| run_single(cfg, &data, seed)).collect()
    }
}

// ---------------------------------------------------------------------------
// Artifacts

/// Create `<output_dir>/run-<unixtime>-<confighash>[-N]` and point
/// `<output_dir>/latest` at it.
pub fn create_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let hash = fnv1a_hex(&cfg.to_json_value().to_string());
    let base = format!("run-{stamp}-{}", &hash[..8]);
    let mut dir = cfg.output_dir.join(&base);
    let mut suffix = 1;
    while dir.exists() {
        suffix += 1;
        dir = cfg.output_dir.join(format!("{base}-{suffix}"));
    }
    std::fs::create_dir_all(&dir)?;
    let name = dir.file_name().unwrap().to_string_lossy().into_owned();
    std::fs::write(cfg.output_dir.join("latest"), format!("{name}\n"))?;
    Ok(dir)
}

/// Write per-seed report JSON plus the metrics and diagnostics CSVs.
pub fn write_run_artifacts(dir: &Path, reports: &[RunReport]) -> Result<()> {
    let mut metrics_csv = String::from("seed,horizon,mse,mae\n");
    let mut diag_csv = String::from("seed,record,index,value\n");
    for report in reports {
        std::fs::write(
            dir.join(format!("report-seed{}.json", report.seed)),
            report.to_json(),
        )?;
        metrics_csv.push_str(&format!(
            "{},{},{},{}\n",
            report.seed, report.horizon, report.test_metrics.mse, report.test_metrics.mae
        ));
        if let Some(diag) = &report.diagnostics {
            for (i, v) in diag.per_step_mse.iter().enumerate() {
                diag_csv.push_str(&format!("{},per_step_mse,{},{}\n", report.seed, i, v));
            }
            for (i, v) in diag.per_step_mae.iter().enumerate() {
                diag_csv.push_str(&format!("{},per_step_mae,{},{}\n", report.seed, i, v));
            }
            for (k, v) in diag.adf_train_per_feature.iter().enumerate() {
                if let Some(stat) = v {
                    diag_csv.push_str(&format!("{},adf_train,{},{}\n", report.seed, k, stat));
                }
            }
        }
    }
    std::fs::write(dir.join("metrics.csv"), metrics_csv)?;
    std::fs::write(dir.join("diagnostics.csv"), diag_csv)?;
    Ok(())
}

/// `run_experiment` plus artifact writing; returns the run directory.
pub fn execute_and_write(cfg: &ExperimentConfig, threads: usize) -> Result<(Vec<RunReport>, PathBuf)> {
    let reports = run_experiment(cfg, threads)?;
    let dir = create_run_dir(cfg)?;
    write_run_artifacts(&dir, &reports)?;
    Ok((reports, dir))
}
