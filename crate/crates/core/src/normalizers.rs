//! Normalization transforms and their parameters.
//!
//! Four families share one shape convention (time on rows, features on
//! columns):
//!
//! * per-instance z-score, the reversible wrapper every pipeline except LCD
//!   uses (LCD centers without dividing by the std),
//! * a RevIN-style learnable affine applied inside the z-score pair,
//! * LD, learnable per-time-step shift (optionally scale) matrices on both
//!   the lookback and horizon sides,
//! * LCD, small networks predicting the horizon mean and per-step scaling
//!   coefficients from the lookback, in a linear and an attention variant.
//!
//! Point level allocates one parameter row per time step; instance level
//! collapses the time axis to a single shared row. `param_count` is the
//! closed-form parameter budget used to cross-check allocation.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

/// Time-step granularity of the learned statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Point,
    Instance,
}

/// Per-instance statistics saved by the normalize pass and consumed once at
/// denormalization.
#[derive(Debug, Clone)]
pub struct NormContext {
    pub mu_x: Array1<f64>,
    pub sigma_x: Array1<f64>,
    pub eps: f64,
}

/// Scaling state produced by the LCD normalize pass.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub s: Mat,
    pub mu_y_hat: Array1<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of softplus, `softplus(inv_softplus(y)) == y` for y > 0.
pub(crate) fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

fn broadcast_row(rows: usize, t: usize) -> usize {
    if rows == 1 {
        0
    } else {
        t
    }
}

// ---------------------------------------------------------------------------
// z-score

/// Per-instance z-score over the lookback. Sample std, denominator L−1.
pub fn zscore_normalize(x: &Mat, eps: f64) -> (Mat, NormContext) {
    let (l, d) = x.dim();
    assert!(l >= 2, "z-score needs at least two rows");
    let mut mu = Array1::zeros(d);
    let mut sigma = Array1::zeros(d);
    for k in 0..d {
        let col = x.column(k);
        let m = col.mean().unwrap();
        let ss: f64 = col.iter().map(|v| (v - m).powi(2)).sum();
        mu[k] = m;
        sigma[k] = (ss / (l - 1) as f64).sqrt();
    }
    let mut out = x.clone();
    for ((_, k), v) in out.indexed_iter_mut() {
        *v = (*v - mu[k]) / (sigma[k] + eps);
    }
    (out, NormContext { mu_x: mu, sigma_x: sigma, eps })
}

/// Reintroduce the lookback statistics on the horizon side.
pub fn zscore_denormalize(y_bar: &Mat, ctx: &NormContext) -> Mat {
    let mut out = y_bar.clone();
    for ((_, k), v) in out.indexed_iter_mut() {
        *v = *v * (ctx.sigma_x[k] + ctx.eps) + ctx.mu_x[k];
    }
    out
}

// ---------------------------------------------------------------------------
// LD

/// Learnable shift (and optional positive scale) per time step and feature.
/// Instance level stores a single row per side. Scales are stored as softplus
/// preimages so the division stays well-defined during optimization.
#[derive(Debug, Clone)]
pub struct LdParams {
    pub level: Level,
    pub shift_in: Mat,
    pub shift_out: Mat,
    pub scale_in_raw: Option<Mat>,
    pub scale_out_raw: Option<Mat>,
}

impl LdParams {
    /// Zero-initialized shifts: the pipeline starts exactly at plain z-score.
    pub fn new(lookback: usize, horizon: usize, d: usize, level: Level, use_scale: bool) -> Self {
        let (rows_in, rows_out) = match level {
            Level::Point => (lookback, horizon),
            Level::Instance => (1, 1),
        };
        let one = inv_softplus(1.0);
        let scale = |r: usize| use_scale.then(|| Array2::from_elem((r, d), one));
        LdParams {
            level,
            shift_in: Array2::zeros((rows_in, d)),
            shift_out: Array2::zeros((rows_out, d)),
            scale_in_raw: scale(rows_in),
            scale_out_raw: scale(rows_out),
        }
    }

    pub fn use_scale(&self) -> bool {
        self.scale_in_raw.is_some()
    }

    pub fn num_params(&self) -> usize {
        let opt = |m: &Option<Mat>| m.as_ref().map_or(0, Mat::len);
        self.shift_in.len()
            + self.shift_out.len()
            + opt(&self.scale_in_raw)
            + opt(&self.scale_out_raw)
    }
}

/// x̃ = (x̄ − shift) ⊘ scale, elementwise; without scales just the shift.
pub fn ld_normalize(x_bar: &Mat, params: &LdParams) -> Mat {
    let rows = params.shift_in.nrows();
    let mut out = x_bar.clone();
    for ((t, k), v) in out.indexed_iter_mut() {
        let r = broadcast_row(rows, t);
        *v -= params.shift_in[[r, k]];
        if let Some(raw) = &params.scale_in_raw {
            *v /= softplus(raw[[r, k]]);
        }
    }
    out
}

/// ȳ = ỹ ⊙ scale + shift on the horizon side.
pub fn ld_denormalize(y_tilde: &Mat, params: &LdParams) -> Mat {
    let rows = params.shift_out.nrows();
    let mut out = y_tilde.clone();
    for ((n, k), v) in out.indexed_iter_mut() {
        let r = broadcast_row(rows, n);
        if let Some(raw) = &params.scale_out_raw {
            *v *= softplus(raw[[r, k]]);
        }
        *v += params.shift_out[[r, k]];
    }
    out
}

// ---------------------------------------------------------------------------
// RevIN baseline

/// Learnable per-feature affine inside the z-score pair.
#[derive(Debug, Clone)]
pub struct RevInParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl RevInParams {
    pub fn new(d: usize) -> Self {
        RevInParams { scale: Array1::ones(d), shift: Array1::zeros(d) }
    }

    pub fn num_params(&self) -> usize {
        self.scale.len() + self.shift.len()
    }
}

pub fn revin_normalize(x_bar: &Mat, params: &RevInParams) -> Mat {
    let mut out = x_bar.clone();
    for ((_, k), v) in out.indexed_iter_mut() {
        *v = params.scale[k] * *v + params.shift[k];
    }
    out
}

pub fn revin_denormalize(y_tilde: &Mat, params: &RevInParams) -> Result<Mat> {
    if let Some(k) = params.scale.iter().position(|g| g.abs() < 1e-12) {
        return Err(Error::DivisionByZero(format!("revin scale[{k}]")));
    }
    let mut out = y_tilde.clone();
    for ((_, k), v) in out.indexed_iter_mut() {
        *v = (*v - params.shift[k]) / params.scale[k];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// LCD

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LcdVariant {
    Linear,
    Attention,
}

/// The per-step scaling network. One weight set per feature; `individual =
/// false` shares a single set across features.
#[derive(Debug, Clone)]
pub enum ScaleNet {
    Linear { weights: Vec<Mat> },
    Attention { query: Vec<Mat>, key: Vec<Mat>, value: Vec<Mat> },
}

#[derive(Debug, Clone)]
pub struct LcdParams {
    pub variant: LcdVariant,
    pub level: Level,
    pub individual: bool,
    pub centered_input: bool,
    pub horizon: usize,
    /// Row f (or the shared row 0) dotted with the raw lookback predicts the
    /// horizon mean of feature f.
    pub mean_weights: Mat,
    pub scale_net: ScaleNet,
}

impl LcdParams {
    pub fn new(
        variant: LcdVariant,
        lookback: usize,
        horizon: usize,
        d: usize,
        level: Level,
        individual: bool,
        centered_input: bool,
    ) -> Self {
        let features = if individual { d } else { 1 };
        let s_rows = match level {
            Level::Point => horizon,
            Level::Instance => 1,
        };
        let zeros = || (0..features).map(|_| Array2::zeros((s_rows, lookback))).collect();
        let scale_net = match variant {
            LcdVariant::Linear => ScaleNet::Linear { weights: zeros() },
            LcdVariant::Attention => {
                ScaleNet::Attention { query: zeros(), key: zeros(), value: zeros() }
            }
        };
        LcdParams {
            variant,
            level,
            individual,
            centered_input,
            horizon,
            mean_weights: Array2::zeros((features, lookback)),
            scale_net,
        }
    }

    /// Index into the per-feature weight vectors.
    pub(crate) fn feature_slot(&self, k: usize) -> usize {
        if self.individual {
            k
        } else {
            0
        }
    }

    pub fn num_params(&self) -> usize {
        let net = match &self.scale_net {
            ScaleNet::Linear { weights } => weights.iter().map(Mat::len).sum::<usize>(),
            ScaleNet::Attention { query, key, value } => {
                [query, key, value].iter().flat_map(|v| v.iter()).map(Mat::len).sum()
            }
        };
        self.mean_weights.len() + net
    }
}

/// Remove the per-feature lookback mean. Returned alongside so LCD's
/// denormalization can not accidentally reuse it: the horizon mean is
/// predicted, not copied.
pub fn lcd_center(x: &Mat) -> (Mat, Array1<f64>) {
    let d = x.ncols();
    let mut mu = Array1::zeros(d);
    for k in 0..d {
        mu[k] = x.column(k).mean().unwrap();
    }
    let mut out = x.clone();
    for ((_, k), v) in out.indexed_iter_mut() {
        *v -= mu[k];
    }
    (out, mu)
}

/// μ̂_y[k] = h_k · x[:,k], no bias. Consumes the raw lookback.
pub fn lcd_predict_mean(x: &Mat, params: &LcdParams) -> Array1<f64> {
    let d = x.ncols();
    let mut out = Array1::zeros(d);
    for k in 0..d {
        let row = params.mean_weights.row(params.feature_slot(k));
        out[k] = x.column(k).dot(&row);
    }
    out
}

/// s[n,k] = 1 + f_{n,k} · input[:,k]; the instance level's single row is
/// broadcast to all horizon steps.
pub fn lcd_scales_linear(input: &Mat, params: &LcdParams) -> Mat {
    let ScaleNet::Linear { weights } = &params.scale_net else {
        panic!("linear scales requested from an attention parameter set");
    };
    let d = input.ncols();
    let h = params.horizon;
    let mut s = Array2::ones((h, d));
    for k in 0..d {
        let w = &weights[params.feature_slot(k)];
        let prod = w.dot(&input.column(k).to_owned());
        for n in 0..h {
            s[[n, k]] += prod[broadcast_row(w.nrows(), n)];
        }
    }
    s
}

/// Attention internals kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionTrace {
    /// |input| per feature.
    pub magnitudes: Vec<Array1<f64>>,
    pub query: Vec<Array1<f64>>,
    pub key: Vec<Array1<f64>>,
    pub value: Vec<Array1<f64>>,
    /// Row-softmax attention matrix per feature.
    pub attn: Vec<Mat>,
}

pub fn lcd_scales_attention(input: &Mat, params: &LcdParams) -> Mat {
    lcd_scales_attention_traced(input, params).0
}

/// Per feature k: a = |input[:,k]|, q/e/v = U_k a, V_k a, W_k a, attention =
/// row-softmax(q eᵀ/√rows), s column = 1 + attention·v. With a single row
/// (instance level) the softmax collapses and s = 1 + W_k a.
pub(crate) fn lcd_scales_attention_traced(input: &Mat, params: &LcdParams) -> (Mat, AttentionTrace) {
    let ScaleNet::Attention { query, key, value } = &params.scale_net else {
        panic!("attention scales requested from a linear parameter set");
    };
    let d = input.ncols();
    let h = params.horizon;
    let mut s = Array2::ones((h, d));
    let mut trace = AttentionTrace {
        magnitudes: Vec::with_capacity(d),
        query: Vec::with_capacity(d),
        key: Vec::with_capacity(d),
        value: Vec::with_capacity(d),
        attn: Vec::with_capacity(d),
    };
    for k in 0..d {
        let slot = params.feature_slot(k);
        let a = input.column(k).mapv(f64::abs);
        let q = query[slot].dot(&a);
        let e = key[slot].dot(&a);
        let v = value[slot].dot(&a);
        let rows = q.len();
        let scale = 1.0 / (rows as f64).sqrt();
        let mut attn = Array2::zeros((rows, rows));
        for i in 0..rows {
            let logits: Vec<f64> = (0..rows).map(|j| q[i] * e[j] * scale).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..rows {
                attn[[i, j]] = exps[j] / total;
            }
        }
        let gated = attn.dot(&v);
        for n in 0..h {
            s[[n, k]] += gated[broadcast_row(rows, n)];
        }
        trace.magnitudes.push(a);
        trace.query.push(q);
        trace.key.push(e);
        trace.value.push(v);
        trace.attn.push(attn);
    }
    (s, trace)
}

/// ŷ[n,k] = ỹ[n,k]·s[n,k] + μ̂_y[k].
pub fn lcd_denormalize(y_tilde: &Mat, state: &InnerState) -> Mat {
    let mut out = y_tilde.clone();
    for ((n, k), v) in out.indexed_iter_mut() {
        *v = *v * state.s[[n, k]] + state.mu_y_hat[k];
    }
    out
}

// ---------------------------------------------------------------------------
// Parameter budget

/// Closed-form trainable-parameter counts per method. For the methods this
/// crate implements the count must equal the number of scalars actually
/// allocated; the others are listed for comparison tables only.
pub fn param_count(
    method: &str,
    d: usize,
    l: usize,
    h: usize,
    p_slice: Option<usize>,
) -> Result<u64> {
    let (d, l, h) = (d as u64, l as u64, h as u64);
    match method.to_ascii_lowercase().as_str() {
        "revin" => Ok(2 * d),
        "dish-ts" => Ok(2 * d * l),
        "san" => {
            let p = p_slice.ok_or_else(|| Error::Config("san needs a slice length".into()))? as u64;
            if p == 0 {
                return Err(Error::Config("san slice length must be positive".into()));
            }
            Ok(1024 * (l + 2 * h + p * l) / p)
        }
        "nst" => Ok(6 * l + 128 * (4 * d + 256 + 1 + l)),
        "ld" => Ok(d * (l + h)),
        "lcd-linear" => Ok(d * l * (h + 1)),
        "lcd-as" => Ok(d * l * (3 * h + 1)),
        other => Err(Error::UnknownMethod(other.to_owned())),
    }
}
