//! Regime-switching synthetic series.
//!
//! Each feature is an AR(1) noise process riding on a piecewise-constant
//! level and scale. Regime lengths are geometric (memoryless), so window
//! boundaries never align with regime boundaries systematically; level steps
//! are Normal(0, mean_drift_scale²) and scale multipliers are
//! exp(Normal(0, var_drift_scale²)). Feature k draws from its own ChaCha8
//! stream seeded with `seed ^ k`, so generation is deterministic and could
//! run per-feature in parallel.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::SeriesFrame;
use crate::error::{Error, Result};
use crate::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub t_len: usize,
    pub d: usize,
    pub regime_len_mean: f64,
    pub mean_drift_scale: f64,
    pub var_drift_scale: f64,
    pub ar_coeff: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t_len: 4096,
            d: 4,
            regime_len_mean: 32.0,
            mean_drift_scale: 0.5,
            var_drift_scale: 0.0,
            ar_coeff: 0.7,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 || self.d == 0 {
            return Err(Error::Config("synth: t_len must be ≥ 2 and d ≥ 1".into()));
        }
        if self.regime_len_mean < 2.0 {
            return Err(Error::Config("synth.regime_len_mean must be ≥ 2".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::Config("synth.noise_std must be > 0".into()));
        }
        if !(self.ar_coeff > -1.0 && self.ar_coeff < 1.0) {
            return Err(Error::Config("synth.ar_coeff must lie in (-1, 1)".into()));
        }
        if self.mean_drift_scale < 0.0 || self.var_drift_scale < 0.0 {
            return Err(Error::Config("synth drift scales must be ≥ 0".into()));
        }
        Ok(())
    }
}

fn geometric_len(rng: &mut ChaCha8Rng, p: f64) -> usize {
    // Inverse CDF of the geometric distribution on {1, 2, ...}.
    let u: f64 = rng.random();
    ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize + 1
}

pub fn gen_piecewise(config: &SynthConfig) -> Result<SeriesFrame> {
    config.validate()?;
    let p = 1.0 / config.regime_len_mean;
    let phi = config.ar_coeff;
    let mut values: Mat = Array2::zeros((config.t_len, config.d));

    for k in 0..config.d {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ k as u64);
        let mut level = 0.0_f64;
        let mut scale = 1.0_f64;
        // Stationary AR(1) start so the first regime is not special.
        let stat_std = config.noise_std / (1.0 - phi * phi).sqrt();
        let mut ar: f64 = stat_std * rng.sample::<f64, _>(StandardNormal);
        let mut remaining = geometric_len(&mut rng, p);
        for t in 0..config.t_len {
            if remaining == 0 {
                level += config.mean_drift_scale * rng.sample::<f64, _>(StandardNormal);
                scale *= (config.var_drift_scale * rng.sample::<f64, _>(StandardNormal)).exp();
                remaining = geometric_len(&mut rng, p);
            }
            ar = phi * ar + config.noise_std * rng.sample::<f64, _>(StandardNormal);
            values[[t, k]] = level + scale * ar;
            remaining -= 1;
        }
    }
    Ok(SeriesFrame::from_values(values))
}

/// Variance of non-overlapping `window`-step means, averaged over features.
/// Level drift inflates this statistic far above the stationary value.
pub fn window_mean_variance(frame: &SeriesFrame, window: usize) -> f64 {
    let t_total = frame.len();
    let d = frame.num_features();
    let n_win = t_total / window;
    assert!(n_win >= 2, "need at least two windows");
    let mut acc = 0.0;
    for k in 0..d {
        let col = frame.values.column(k);
        let means: Vec<f64> = (0..n_win)
            .map(|i| col.slice(ndarray::s![i * window..(i + 1) * window]).mean().unwrap())
            .collect();
        let grand = means.iter().sum::<f64>() / n_win as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_win - 1) as f64;
        acc += var;
    }
    acc / d as f64
}
