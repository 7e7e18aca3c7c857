//! Forecasting backbones: small differentiable maps from an L×D lookback to
//! an H×D horizon.
//!
//! * identity: repeat-last / truncate, parameter-free, for invariant tests,
//! * linear: one H×L weight and H bias per feature,
//! * dlinear: moving-average trend/remainder split, one linear head each,
//! * mlp: per-feature two-layer ReLU network.
//!
//! `shared = true` collapses the per-feature heads to a single head applied
//! to every feature, mirroring the normalizers' `individual` flag.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Identity,
    Linear,
    DLinear,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl LinearHead {
    fn init(h: usize, l: usize, rng: &mut impl Rng) -> Self {
        // Uniform ±1/sqrt(fan_in), the usual linear-layer default.
        let bound = 1.0 / (l as f64).sqrt();
        LinearHead {
            weight: Array2::from_shape_fn((h, l), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(h, |_| rng.random_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        LinearHead {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct MlpHead {
    pub w1: Mat,
    pub b1: Array1<f64>,
    pub w2: Mat,
    pub b2: Array1<f64>,
}

impl MlpHead {
    fn init(h: usize, l: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let b1 = 1.0 / (l as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        MlpHead {
            w1: Array2::from_shape_fn((hidden, l), |_| rng.random_range(-b1..b1)),
            b1: Array1::from_shape_fn(hidden, |_| rng.random_range(-b1..b1)),
            w2: Array2::from_shape_fn((h, hidden), |_| rng.random_range(-b2..b2)),
            b2: Array1::from_shape_fn(h, |_| rng.random_range(-b2..b2)),
        }
    }

    fn zeros_like(&self) -> Self {
        MlpHead {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Parameters of one backbone. `heads` holds one entry per feature, or a
/// single shared entry.
#[derive(Debug, Clone)]
pub enum BackboneParams {
    Identity { lookback: usize, horizon: usize },
    Linear { heads: Vec<LinearHead> },
    DLinear { kernel: usize, trend: Vec<LinearHead>, remainder: Vec<LinearHead> },
    Mlp { heads: Vec<MlpHead> },
}

impl BackboneParams {
    pub fn identity(lookback: usize, horizon: usize) -> Self {
        BackboneParams::Identity { lookback, horizon }
    }

    pub fn linear(l: usize, h: usize, d: usize, shared: bool, rng: &mut impl Rng) -> Self {
        let n = if shared { 1 } else { d };
        BackboneParams::Linear { heads: (0..n).map(|_| LinearHead::init(h, l, rng)).collect() }
    }

    pub fn dlinear(
        l: usize,
        h: usize,
        d: usize,
        kernel: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1);
        let n = if shared { 1 } else { d };
        BackboneParams::DLinear {
            kernel,
            trend: (0..n).map(|_| LinearHead::init(h, l, rng)).collect(),
            remainder: (0..n).map(|_| LinearHead::init(h, l, rng)).collect(),
        }
    }

    pub fn mlp(l: usize, h: usize, d: usize, hidden: usize, shared: bool, rng: &mut impl Rng) -> Self {
        let n = if shared { 1 } else { d };
        BackboneParams::Mlp { heads: (0..n).map(|_| MlpHead::init(h, l, hidden, rng)).collect() }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneParams::Identity { .. } => BackboneKind::Identity,
            BackboneParams::Linear { .. } => BackboneKind::Linear,
            BackboneParams::DLinear { .. } => BackboneKind::DLinear,
            BackboneParams::Mlp { .. } => BackboneKind::Mlp,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            BackboneParams::Identity { .. } => 0,
            BackboneParams::Linear { heads } => heads.iter().map(LinearHead::len).sum(),
            BackboneParams::DLinear { trend, remainder, .. } => {
                trend.iter().chain(remainder).map(LinearHead::len).sum()
            }
            BackboneParams::Mlp { heads } => heads.iter().map(MlpHead::len).sum(),
        }
    }

    /// Gradient container with the exact same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        match self {
            BackboneParams::Identity { lookback, horizon } => {
                BackboneParams::Identity { lookback: *lookback, horizon: *horizon }
            }
            BackboneParams::Linear { heads } => {
                BackboneParams::Linear { heads: heads.iter().map(LinearHead::zeros_like).collect() }
            }
            BackboneParams::DLinear { kernel, trend, remainder } => BackboneParams::DLinear {
                kernel: *kernel,
                trend: trend.iter().map(LinearHead::zeros_like).collect(),
                remainder: remainder.iter().map(LinearHead::zeros_like).collect(),
            },
            BackboneParams::Mlp { heads } => {
                BackboneParams::Mlp { heads: heads.iter().map(MlpHead::zeros_like).collect() }
            }
        }
    }

    fn slot(heads_len: usize, k: usize) -> usize {
        if heads_len == 1 {
            0
        } else {
            k
        }
    }

    fn check_shapes(&self, x: &Mat, expected_l: usize, heads_len: usize) -> Result<()> {
        let (l, d) = x.dim();
        if l != expected_l || (heads_len != 1 && d != heads_len) {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected_l}x{heads_len} lookback"),
                actual: format!("{l}x{d}"),
            });
        }
        Ok(())
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub input: Mat,
    /// dlinear: the moving-average trend component of the input.
    pub trend: Option<Mat>,
    /// mlp: hidden pre-activations, one column per feature.
    pub pre_hidden: Option<Mat>,
}

/// Edge-replicated moving average along rows. Offsets cover a window of
/// `kernel` rows roughly centered on each step; out-of-range rows clamp to
/// the series edges. Odd kernels center exactly.
pub fn moving_average(x: &Mat, kernel: usize) -> Mat {
    let (l, d) = x.dim();
    let back = (kernel - 1) / 2;
    let mut out = Array2::zeros((l, d));
    for t in 0..l {
        for j in 0..kernel {
            let idx = (t + j).saturating_sub(back).min(l - 1);
            for k in 0..d {
                out[[t, k]] += x[[idx, k]];
            }
        }
    }
    out / kernel as f64
}

/// Adjoint of `moving_average`: scatter each output-row gradient back to the
/// clamped input rows it averaged.
fn moving_average_adjoint(g: &Mat, kernel: usize) -> Mat {
    let (l, d) = g.dim();
    let back = (kernel - 1) / 2;
    let mut out = Array2::zeros((l, d));
    for t in 0..l {
        for j in 0..kernel {
            let idx = (t + j).saturating_sub(back).min(l - 1);
            for k in 0..d {
                out[[idx, k]] += g[[t, k]] / kernel as f64;
            }
        }
    }
    out
}

fn head_forward(head: &LinearHead, col: ndarray::ArrayView1<f64>) -> Array1<f64> {
    head.weight.dot(&col) + &head.bias
}

pub fn backbone_forward(x: &Mat, params: &BackboneParams) -> Result<(Mat, BackboneTrace)> {
    let d = x.ncols();
    let mut trace =
        BackboneTrace { input: x.clone(), trend: None, pre_hidden: None };
    let out = match params {
        BackboneParams::Identity { lookback, horizon } => {
            params.check_shapes(x, *lookback, 1)?;
            let mut out = Array2::zeros((*horizon, d));
            for n in 0..*horizon {
                let r = n.min(*lookback - 1);
                for k in 0..d {
                    out[[n, k]] = x[[r, k]];
                }
            }
            out
        }
        BackboneParams::Linear { heads } => {
            let l = heads[0].weight.ncols();
            params.check_shapes(x, l, heads.len())?;
            let h = heads[0].weight.nrows();
            let mut out = Array2::zeros((h, d));
            for k in 0..d {
                let y = head_forward(&heads[BackboneParams::slot(heads.len(), k)], x.column(k));
                out.column_mut(k).assign(&y);
            }
            out
        }
        BackboneParams::DLinear { kernel, trend, remainder } => {
            let l = trend[0].weight.ncols();
            params.check_shapes(x, l, trend.len())?;
            let h = trend[0].weight.nrows();
            let trend_part = moving_average(x, *kernel);
            let remainder_part = x - &trend_part;
            let mut out = Array2::zeros((h, d));
            for k in 0..d {
                let slot = BackboneParams::slot(trend.len(), k);
                let y = head_forward(&trend[slot], trend_part.column(k))
                    + head_forward(&remainder[slot], remainder_part.column(k));
                out.column_mut(k).assign(&y);
            }
            trace.trend = Some(trend_part);
            out
        }
        BackboneParams::Mlp { heads } => {
            let l = heads[0].w1.ncols();
            params.check_shapes(x, l, heads.len())?;
            let hidden = heads[0].w1.nrows();
            let h = heads[0].w2.nrows();
            let mut pre = Array2::zeros((hidden, d));
            let mut out = Array2::zeros((h, d));
            for k in 0..d {
                let head = &heads[BackboneParams::slot(heads.len(), k)];
                let z1 = head.w1.dot(&x.column(k)) + &head.b1;
                let a1 = z1.mapv(|v| v.max(0.0));
                let y = head.w2.dot(&a1) + &head.b2;
                pre.column_mut(k).assign(&z1);
                out.column_mut(k).assign(&y);
            }
            trace.pre_hidden = Some(pre);
            out
        }
    };
    Ok((out, trace))
}

/// grads: weight += go ⊗ col, bias += go. Row-wise so the updates vectorize.
fn accumulate_outer(weight: &mut Mat, bias: &mut Array1<f64>, go: &Array1<f64>, col: &Array1<f64>) {
    for (n, &g) in go.iter().enumerate() {
        weight.row_mut(n).scaled_add(g, col);
    }
    bias.scaled_add(1.0, go);
}

/// Accumulate parameter gradients into `grads` (a `zeros_like` clone) and
/// return the gradient with respect to the input.
pub fn backbone_backward(
    params: &BackboneParams,
    trace: &BackboneTrace,
    g_out: &Mat,
    grads: &mut BackboneParams,
) -> Mat {
    let x = &trace.input;
    let (l, d) = x.dim();
    let mut g_in = Array2::zeros((l, d));
    match (params, grads) {
        (BackboneParams::Identity { lookback, .. }, _) => {
            for n in 0..g_out.nrows() {
                let r = n.min(*lookback - 1);
                for k in 0..d {
                    g_in[[r, k]] += g_out[[n, k]];
                }
            }
        }
        (BackboneParams::Linear { heads }, BackboneParams::Linear { heads: g_heads }) => {
            for k in 0..d {
                let slot = BackboneParams::slot(heads.len(), k);
                let head = &heads[slot];
                let gh = &mut g_heads[slot];
                let go = g_out.column(k).to_owned();
                let col = x.column(k).to_owned();
                accumulate_outer(&mut gh.weight, &mut gh.bias, &go, &col);
                let back = head.weight.t().dot(&go);
                g_in.column_mut(k).scaled_add(1.0, &back);
            }
        }
        (
            BackboneParams::DLinear { kernel, trend, remainder },
            BackboneParams::DLinear { trend: g_trend, remainder: g_rem, .. },
        ) => {
            let trend_part = trace.trend.as_ref().expect("dlinear trace");
            let remainder_part = x - trend_part;
            let mut g_trend_in = Array2::zeros((l, d));
            let mut g_rem_in = Array2::zeros((l, d));
            for k in 0..d {
                let slot = BackboneParams::slot(trend.len(), k);
                let go = g_out.column(k).to_owned();
                for (head, gh, part, g_part) in [
                    (&trend[slot], &mut g_trend[slot], trend_part, &mut g_trend_in),
                    (&remainder[slot], &mut g_rem[slot], &remainder_part, &mut g_rem_in),
                ] {
                    let col = part.column(k).to_owned();
                    accumulate_outer(&mut gh.weight, &mut gh.bias, &go, &col);
                    let back = head.weight.t().dot(&go);
                    g_part.column_mut(k).scaled_add(1.0, &back);
                }
            }
            // input = trend + remainder with trend = MA(input):
            // g_in = g_rem + MA_adjoint(g_trend − g_rem).
            let diff = &g_trend_in - &g_rem_in;
            g_in = g_rem_in + moving_average_adjoint(&diff, *kernel);
        }
        (BackboneParams::Mlp { heads }, BackboneParams::Mlp { heads: g_heads }) => {
            let pre = trace.pre_hidden.as_ref().expect("mlp trace");
            for k in 0..d {
                let slot = BackboneParams::slot(heads.len(), k);
                let head = &heads[slot];
                let gh = &mut g_heads[slot];
                let go = g_out.column(k).to_owned();
                let z1 = pre.column(k);
                let a1 = z1.mapv(|v| v.max(0.0));
                accumulate_outer(&mut gh.w2, &mut gh.b2, &go, &a1);
                let mut g_a1 = head.w2.t().dot(&go);
                for (g, z) in g_a1.iter_mut().zip(z1.iter()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                let col = x.column(k).to_owned();
                accumulate_outer(&mut gh.w1, &mut gh.b1, &g_a1, &col);
                let back = head.w1.t().dot(&g_a1);
                g_in.column_mut(k).scaled_add(1.0, &back);
            }
        }
        _ => panic!("gradient container kind does not match parameters"),
    }
    g_in
}
