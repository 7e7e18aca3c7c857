//! Trainable pipeline: normalizer + backbone, exact gradients, Adam, and
//! the training loop.
//!
//! Parameters stay in their structured containers; optimization views them
//! through a flat vector whose order is fixed by the visitor below
//! (normalizer scalars first, then backbone scalars). Gradients are
//! accumulated into a zeroed structural clone of the pipeline, so the same
//! visitor guarantees parameter/gradient alignment.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{backbone_backward, backbone_forward, BackboneParams, BackboneTrace};
use crate::dataset::InstancePair;
use crate::error::{Error, Result};
use crate::normalizers::{
    lcd_center, lcd_denormalize, lcd_predict_mean, lcd_scales_attention_traced,
    lcd_scales_linear, ld_denormalize, ld_normalize, revin_denormalize, revin_normalize,
    sigmoid, softplus, zscore_denormalize, zscore_normalize, AttentionTrace, InnerState,
    LcdParams, LcdVariant, LdParams, NormContext, RevInParams, ScaleNet,
};
use crate::Mat;

/// Normalizer selection plus its trainable parameters.
#[derive(Debug, Clone)]
pub enum NormalizerParams {
    ZScore,
    RevIn(RevInParams),
    Ld(LdParams),
    Lcd(LcdParams),
}

impl NormalizerParams {
    pub fn num_params(&self) -> usize {
        match self {
            NormalizerParams::ZScore => 0,
            NormalizerParams::RevIn(p) => p.num_params(),
            NormalizerParams::Ld(p) => p.num_params(),
            NormalizerParams::Lcd(p) => p.num_params(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub normalizer: NormalizerParams,
    pub backbone: BackboneParams,
    pub eps: f64,
    /// Frozen normalizer parameters are excluded from the trainable flat
    /// vector; they stay at their construction values.
    pub freeze_normalizer: bool,
}

/// Intermediate activations retained between forward and backward.
#[derive(Debug, Clone)]
pub struct Trace {
    pub(crate) ctx: Option<NormContext>,
    /// z-scored lookback before any learnable transform.
    pub(crate) x_bar: Option<Mat>,
    pub(crate) backbone: BackboneTrace,
    pub(crate) y_tilde: Mat,
    pub(crate) inner: Option<InnerState>,
    pub(crate) attn: Option<AttentionTrace>,
    /// Raw lookback (input of the LCD mean predictor).
    pub(crate) raw_x: Option<Mat>,
    /// Input the LCD scaling network saw (centered or raw).
    pub(crate) scales_input: Option<Mat>,
    pub y_hat: Mat,
}

// ---------------------------------------------------------------------------
// Flat-vector plumbing

fn visit_mat(m: &Mat, f: &mut impl FnMut(f64)) {
    for v in m.iter() {
        f(*v);
    }
}

fn visit_mat_mut(m: &mut Mat, f: &mut impl FnMut(&mut f64)) {
    for v in m.iter_mut() {
        f(v);
    }
}

fn visit_vec(v: &Array1<f64>, f: &mut impl FnMut(f64)) {
    for x in v.iter() {
        f(*x);
    }
}

fn visit_vec_mut(v: &mut Array1<f64>, f: &mut impl FnMut(&mut f64)) {
    for x in v.iter_mut() {
        f(x);
    }
}

fn visit_normalizer(n: &NormalizerParams, f: &mut impl FnMut(f64)) {
    match n {
        NormalizerParams::ZScore => {}
        NormalizerParams::RevIn(p) => {
            visit_vec(&p.scale, f);
            visit_vec(&p.shift, f);
        }
        NormalizerParams::Ld(p) => {
            visit_mat(&p.shift_in, f);
            visit_mat(&p.shift_out, f);
            if let Some(m) = &p.scale_in_raw {
                visit_mat(m, f);
            }
            if let Some(m) = &p.scale_out_raw {
                visit_mat(m, f);
            }
        }
        NormalizerParams::Lcd(p) => {
            visit_mat(&p.mean_weights, f);
            match &p.scale_net {
                ScaleNet::Linear { weights } => weights.iter().for_each(|m| visit_mat(m, f)),
                ScaleNet::Attention { query, key, value } => {
                    query.iter().for_each(|m| visit_mat(m, f));
                    key.iter().for_each(|m| visit_mat(m, f));
                    value.iter().for_each(|m| visit_mat(m, f));
                }
            }
        }
    }
}

fn visit_normalizer_mut(n: &mut NormalizerParams, f: &mut impl FnMut(&mut f64)) {
    match n {
        NormalizerParams::ZScore => {}
        NormalizerParams::RevIn(p) => {
            visit_vec_mut(&mut p.scale, f);
            visit_vec_mut(&mut p.shift, f);
        }
        NormalizerParams::Ld(p) => {
            visit_mat_mut(&mut p.shift_in, f);
            visit_mat_mut(&mut p.shift_out, f);
            if let Some(m) = &mut p.scale_in_raw {
                visit_mat_mut(m, f);
            }
            if let Some(m) = &mut p.scale_out_raw {
                visit_mat_mut(m, f);
            }
        }
        NormalizerParams::Lcd(p) => {
            visit_mat_mut(&mut p.mean_weights, f);
            match &mut p.scale_net {
                ScaleNet::Linear { weights } => {
                    weights.iter_mut().for_each(|m| visit_mat_mut(m, f))
                }
                ScaleNet::Attention { query, key, value } => {
                    query.iter_mut().for_each(|m| visit_mat_mut(m, f));
                    key.iter_mut().for_each(|m| visit_mat_mut(m, f));
                    value.iter_mut().for_each(|m| visit_mat_mut(m, f));
                }
            }
        }
    }
}

fn visit_backbone(b: &BackboneParams, f: &mut impl FnMut(f64)) {
    match b {
        BackboneParams::Identity { .. } => {}
        BackboneParams::Linear { heads } => {
            for h in heads {
                visit_mat(&h.weight, f);
                visit_vec(&h.bias, f);
            }
        }
        BackboneParams::DLinear { trend, remainder, .. } => {
            for h in trend.iter().chain(remainder) {
                visit_mat(&h.weight, f);
                visit_vec(&h.bias, f);
            }
        }
        BackboneParams::Mlp { heads } => {
            for h in heads {
                visit_mat(&h.w1, f);
                visit_vec(&h.b1, f);
                visit_mat(&h.w2, f);
                visit_vec(&h.b2, f);
            }
        }
    }
}

fn visit_backbone_mut(b: &mut BackboneParams, f: &mut impl FnMut(&mut f64)) {
    match b {
        BackboneParams::Identity { .. } => {}
        BackboneParams::Linear { heads } => {
            for h in heads {
                visit_mat_mut(&mut h.weight, f);
                visit_vec_mut(&mut h.bias, f);
            }
        }
        BackboneParams::DLinear { trend, remainder, .. } => {
            for h in trend.iter_mut().chain(remainder.iter_mut()) {
                visit_mat_mut(&mut h.weight, f);
                visit_vec_mut(&mut h.bias, f);
            }
        }
        BackboneParams::Mlp { heads } => {
            for h in heads {
                visit_mat_mut(&mut h.w1, f);
                visit_vec_mut(&mut h.b1, f);
                visit_mat_mut(&mut h.w2, f);
                visit_vec_mut(&mut h.b2, f);
            }
        }
    }
}

impl Pipeline {
    pub fn new(normalizer: NormalizerParams, backbone: BackboneParams, eps: f64) -> Self {
        Pipeline { normalizer, backbone, eps, freeze_normalizer: false }
    }

    /// Trainable scalar count (frozen normalizer excluded).
    pub fn num_trainable(&self) -> usize {
        let norm = if self.freeze_normalizer { 0 } else { self.normalizer.num_params() };
        norm + self.backbone.num_params()
    }

    fn visit(&self, f: &mut impl FnMut(f64)) {
        if !self.freeze_normalizer {
            visit_normalizer(&self.normalizer, f);
        }
        visit_backbone(&self.backbone, f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        if !self.freeze_normalizer {
            visit_normalizer_mut(&mut self.normalizer, f);
        }
        visit_backbone_mut(&mut self.backbone, f);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        self.visit(&mut |v| out.push(v));
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_trainable(), "flat vector length");
        let mut it = values.iter();
        self.visit_mut(&mut |v| *v = *it.next().unwrap());
    }

    /// Structural clone with every parameter scalar zeroed: the gradient
    /// container.
    pub fn zeros_like(&self) -> Pipeline {
        let mut out = self.clone();
        visit_normalizer_mut(&mut out.normalizer, &mut |v| *v = 0.0);
        visit_backbone_mut(&mut out.backbone, &mut |v| *v = 0.0);
        out
    }

    // -----------------------------------------------------------------------
    // Forward

    pub fn forward(&self, x: &Mat) -> Result<(Mat, Trace)> {
        match &self.normalizer {
            NormalizerParams::ZScore => {
                let (x_bar, ctx) = zscore_normalize(x, self.eps);
                let (y_tilde, bt) = backbone_forward(&x_bar, &self.backbone)?;
                let y_hat = zscore_denormalize(&y_tilde, &ctx);
                Ok((
                    y_hat.clone(),
                    Trace {
                        ctx: Some(ctx),
                        x_bar: Some(x_bar),
                        backbone: bt,
                        y_tilde,
                        inner: None,
                        attn: None,
                        raw_x: None,
                        scales_input: None,
                        y_hat,
                    },
                ))
            }
            NormalizerParams::RevIn(p) => {
                let (x_bar, ctx) = zscore_normalize(x, self.eps);
                let x_tilde = revin_normalize(&x_bar, p);
                let (y_tilde, bt) = backbone_forward(&x_tilde, &self.backbone)?;
                let y_bar = revin_denormalize(&y_tilde, p)?;
                let y_hat = zscore_denormalize(&y_bar, &ctx);
                Ok((
                    y_hat.clone(),
                    Trace {
                        ctx: Some(ctx),
                        x_bar: Some(x_bar),
                        backbone: bt,
                        y_tilde,
                        inner: None,
                        attn: None,
                        raw_x: None,
                        scales_input: None,
                        y_hat,
                    },
                ))
            }
            NormalizerParams::Ld(p) => {
                let (x_bar, ctx) = zscore_normalize(x, self.eps);
                let x_tilde = ld_normalize(&x_bar, p);
                let (y_tilde, bt) = backbone_forward(&x_tilde, &self.backbone)?;
                let y_bar = ld_denormalize(&y_tilde, p);
                let y_hat = zscore_denormalize(&y_bar, &ctx);
                Ok((
                    y_hat.clone(),
                    Trace {
                        ctx: Some(ctx),
                        x_bar: Some(x_bar),
                        backbone: bt,
                        y_tilde,
                        inner: None,
                        attn: None,
                        raw_x: None,
                        scales_input: None,
                        y_hat,
                    },
                ))
            }
            NormalizerParams::Lcd(p) => {
                let (x_c, _mu_x) = lcd_center(x);
                let mu_y_hat = lcd_predict_mean(x, p);
                let scales_input = if p.centered_input { x_c.clone() } else { x.clone() };
                let (s, attn) = match p.variant {
                    LcdVariant::Linear => (lcd_scales_linear(&scales_input, p), None),
                    LcdVariant::Attention => {
                        let (s, trace) = lcd_scales_attention_traced(&scales_input, p);
                        (s, Some(trace))
                    }
                };
                let (y_tilde, bt) = backbone_forward(&x_c, &self.backbone)?;
                let inner = InnerState { s, mu_y_hat };
                let y_hat = lcd_denormalize(&y_tilde, &inner);
                Ok((
                    y_hat.clone(),
                    Trace {
                        ctx: None,
                        x_bar: None,
                        backbone: bt,
                        y_tilde,
                        inner: Some(inner),
                        attn,
                        raw_x: Some(x.clone()),
                        scales_input: Some(scales_input),
                        y_hat,
                    },
                ))
            }
        }
    }

    // -----------------------------------------------------------------------
    // Backward

    /// Accumulate the gradient of `loss_mse(y_hat, y)` for one instance into
    /// `grads` (a `zeros_like` container, possibly already holding other
    /// instances' gradients).
    pub fn backward(&self, trace: &Trace, y: &Mat, grads: &mut Pipeline) {
        let (h, d) = trace.y_hat.dim();
        let scale = 2.0 / (h * d) as f64;
        let mut g_yhat = Array2::zeros((h, d));
        for ((n, k), g) in g_yhat.indexed_iter_mut() {
            *g = scale * (trace.y_hat[[n, k]] - y[[n, k]]);
        }
        match (&self.normalizer, &mut grads.normalizer) {
            (NormalizerParams::ZScore, _) => {
                let ctx = trace.ctx.as_ref().expect("zscore trace");
                let mut g_ytilde = g_yhat;
                for ((_, k), g) in g_ytilde.indexed_iter_mut() {
                    *g *= ctx.sigma_x[k] + ctx.eps;
                }
                backbone_backward(&self.backbone, &trace.backbone, &g_ytilde, &mut grads.backbone);
            }
            (NormalizerParams::RevIn(p), NormalizerParams::RevIn(gp)) => {
                let ctx = trace.ctx.as_ref().expect("revin trace");
                let mut g_ybar = g_yhat;
                for ((_, k), g) in g_ybar.indexed_iter_mut() {
                    *g *= ctx.sigma_x[k] + ctx.eps;
                }
                // y_bar = (y_tilde − shift)/scale
                let mut g_ytilde = Array2::zeros((h, d));
                for ((n, k), g) in g_ybar.indexed_iter() {
                    let gamma = p.scale[k];
                    let y_bar_nk = (trace.y_tilde[[n, k]] - p.shift[k]) / gamma;
                    gp.scale[k] += g * (-y_bar_nk / gamma);
                    gp.shift[k] += g * (-1.0 / gamma);
                    g_ytilde[[n, k]] = g / gamma;
                }
                let g_xtilde = backbone_backward(
                    &self.backbone,
                    &trace.backbone,
                    &g_ytilde,
                    &mut grads.backbone,
                );
                // x_tilde = scale·x_bar + shift
                let x_bar = trace.x_bar.as_ref().expect("revin trace");
                for ((t, k), g) in g_xtilde.indexed_iter() {
                    gp.scale[k] += g * x_bar[[t, k]];
                    gp.shift[k] += g;
                }
            }
            (NormalizerParams::Ld(p), NormalizerParams::Ld(gp)) => {
                let ctx = trace.ctx.as_ref().expect("ld trace");
                let mut g_ybar = g_yhat;
                for ((_, k), g) in g_ybar.indexed_iter_mut() {
                    *g *= ctx.sigma_x[k] + ctx.eps;
                }
                // y_bar = y_tilde ⊙ softplus(q) + P
                let out_rows = p.shift_out.nrows();
                let mut g_ytilde = Array2::zeros((h, d));
                for ((n, k), g) in g_ybar.indexed_iter() {
                    let r = if out_rows == 1 { 0 } else { n };
                    gp.shift_out[[r, k]] += g;
                    match (&p.scale_out_raw, &mut gp.scale_out_raw) {
                        (Some(raw), Some(graw)) => {
                            let q = softplus(raw[[r, k]]);
                            graw[[r, k]] += g * trace.y_tilde[[n, k]] * sigmoid(raw[[r, k]]);
                            g_ytilde[[n, k]] = g * q;
                        }
                        _ => g_ytilde[[n, k]] = *g,
                    }
                }
                let g_xtilde = backbone_backward(
                    &self.backbone,
                    &trace.backbone,
                    &g_ytilde,
                    &mut grads.backbone,
                );
                // x_tilde = (x_bar − A) ⊘ softplus(b)
                let in_rows = p.shift_in.nrows();
                let x_tilde = &trace.backbone.input;
                for ((t, k), g) in g_xtilde.indexed_iter() {
                    let r = if in_rows == 1 { 0 } else { t };
                    match (&p.scale_in_raw, &mut gp.scale_in_raw) {
                        (Some(raw), Some(graw)) => {
                            let b = softplus(raw[[r, k]]);
                            gp.shift_in[[r, k]] += -g / b;
                            graw[[r, k]] +=
                                g * (-x_tilde[[t, k]] / b) * sigmoid(raw[[r, k]]);
                        }
                        _ => gp.shift_in[[r, k]] += -g,
                    }
                }
            }
            (NormalizerParams::Lcd(p), NormalizerParams::Lcd(gp)) => {
                let inner = trace.inner.as_ref().expect("lcd trace");
                // y_hat = y_tilde ⊙ s + mu_y_hat
                let mut g_ytilde = Array2::zeros((h, d));
                let mut g_s = Array2::zeros((h, d));
                let mut g_mu = Array1::<f64>::zeros(d);
                for ((n, k), g) in g_yhat.indexed_iter() {
                    g_ytilde[[n, k]] = g * inner.s[[n, k]];
                    g_s[[n, k]] = g * trace.y_tilde[[n, k]];
                    g_mu[k] += g;
                }
                // mu_y_hat[k] = mean_weights[slot(k)] · raw_x[:,k]
                let raw_x = trace.raw_x.as_ref().expect("lcd trace");
                for k in 0..d {
                    let slot = p.feature_slot(k);
                    let col = raw_x.column(k).to_owned();
                    gp.mean_weights.row_mut(slot).scaled_add(g_mu[k], &col);
                }
                let f_input = trace.scales_input.as_ref().expect("lcd trace");
                match (&p.scale_net, &mut gp.scale_net) {
                    (ScaleNet::Linear { weights }, ScaleNet::Linear { weights: gw }) => {
                        for k in 0..d {
                            let slot = p.feature_slot(k);
                            let rows = weights[slot].nrows();
                            let col = f_input.column(k).to_owned();
                            for n in 0..h {
                                let r = if rows == 1 { 0 } else { n };
                                let g = g_s[[n, k]];
                                if g == 0.0 {
                                    continue;
                                }
                                gw[slot].row_mut(r).scaled_add(g, &col);
                            }
                        }
                    }
                    (ScaleNet::Attention { .. }, ScaleNet::Attention { query: gq, key: gk, value: gv }) => {
                        let attn = trace.attn.as_ref().expect("attention trace");
                        for k in 0..d {
                            let slot = p.feature_slot(k);
                            attention_backward(
                                attn,
                                k,
                                &g_s.column(k).to_owned(),
                                &mut gq[slot],
                                &mut gk[slot],
                                &mut gv[slot],
                            );
                        }
                    }
                    _ => unreachable!("scale net kinds always match"),
                }
                backbone_backward(&self.backbone, &trace.backbone, &g_ytilde, &mut grads.backbone);
            }
            _ => panic!("gradient container normalizer does not match pipeline"),
        }
    }
}

/// Backward through one feature's attention block: s column = 1 + α·v with
/// α = row-softmax(q eᵀ/√rows), q/e/v linear in the magnitude vector.
fn attention_backward(
    trace: &AttentionTrace,
    k: usize,
    g_s_col: &Array1<f64>,
    g_query: &mut Mat,
    g_key: &mut Mat,
    g_value: &mut Mat,
) {
    let a = &trace.magnitudes[k];
    let q = &trace.query[k];
    let e = &trace.key[k];
    let v = &trace.value[k];
    let alpha = &trace.attn[k];
    let rows = q.len();
    let scale = 1.0 / (rows as f64).sqrt();

    let mut g_gated = Array1::zeros(rows);
    for (n, g) in g_s_col.iter().enumerate() {
        let r = if rows == 1 { 0 } else { n };
        g_gated[r] += g;
    }
    let g_v = alpha.t().dot(&g_gated);
    // g_alpha[i,j] = g_gated[i]·v[j]; row-softmax backward.
    let mut g_q = Array1::<f64>::zeros(rows);
    let mut g_e = Array1::<f64>::zeros(rows);
    for i in 0..rows {
        let mut inner = 0.0;
        for j in 0..rows {
            inner += g_gated[i] * v[j] * alpha[[i, j]];
        }
        for j in 0..rows {
            let g_logit = alpha[[i, j]] * (g_gated[i] * v[j] - inner);
            g_q[i] += g_logit * e[j] * scale;
            g_e[j] += g_logit * q[i] * scale;
        }
    }
    for r in 0..rows {
        for t in 0..a.len() {
            g_query[[r, t]] += g_q[r] * a[t];
            g_key[[r, t]] += g_e[r] * a[t];
            g_value[[r, t]] += g_v[r] * a[t];
        }
    }
}

/// Mean squared error over all H·D entries.
pub fn loss_mse(y_hat: &Mat, y: &Mat) -> f64 {
    assert_eq!(y_hat.dim(), y.dim(), "loss shapes");
    let mut total = 0.0;
    for (a, b) in y_hat.iter().zip(y.iter()) {
        let e = a - b;
        total += e * e;
    }
    total / y_hat.len() as f64
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub total: usize,
}

/// Central-difference check of `backward` on one instance. Above 10k
/// parameters a seeded subset is checked instead of every coordinate.
pub fn grad_check(pipe: &Pipeline, x: &Mat, y: &Mat, step: f64) -> Result<GradCheck> {
    grad_check_impl(pipe, x, y, step, false)
}

/// Same check with the largest analytic gradient entry deliberately doubled;
/// exists to demonstrate the checker catches planted faults.
pub fn grad_check_corrupted(pipe: &Pipeline, x: &Mat, y: &Mat, step: f64) -> Result<GradCheck> {
    grad_check_impl(pipe, x, y, step, true)
}

fn grad_check_impl(
    pipe: &Pipeline,
    x: &Mat,
    y: &Mat,
    step: f64,
    corrupt_largest: bool,
) -> Result<GradCheck> {
    assert!((1e-7..=1e-3).contains(&step), "step outside sane range");
    let (_, trace) = pipe.forward(x)?;
    let mut container = pipe.zeros_like();
    pipe.backward(&trace, y, &mut container);
    let mut analytic = container.flat_params();
    if corrupt_largest {
        let worst = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        analytic[worst] *= 2.0;
    }

    let base = pipe.flat_params();
    let total = base.len();
    let indices: Vec<usize> = if total > 10_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        rand::seq::index::sample(&mut rng, total, 10_000).into_vec()
    } else {
        (0..total).collect()
    };

    let mut work = pipe.clone();
    let mut probe = base.clone();
    let mut max_rel = 0.0;
    let mut worst_index = 0;
    for &i in &indices {
        probe[i] = base[i] + step;
        work.set_flat_params(&probe);
        let plus = loss_mse(&work.forward(x)?.0, y);
        probe[i] = base[i] - step;
        work.set_flat_params(&probe);
        let minus = loss_mse(&work.forward(x)?.0, y);
        probe[i] = base[i];
        let fd = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / 1.0f64.max(analytic[i].abs()).max(fd.abs());
        if rel > max_rel {
            max_rel = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck { max_rel_err: max_rel, worst_index, checked: indices.len(), total })
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            max_epochs: 60,
            patience: 3,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Index into the loss vectors of the restored parameters.
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

/// Mean forward MSE over a window set.
pub fn eval_mse(pipe: &Pipeline, set: &[InstancePair]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut total = 0.0;
    for inst in set {
        let (y_hat, _) = pipe.forward(&inst.x)?;
        total += loss_mse(&y_hat, &inst.y);
    }
    Ok(total / set.len() as f64)
}

/// Forecasts for every instance in order.
pub fn predict_set(pipe: &Pipeline, set: &[InstancePair]) -> Result<Vec<Mat>> {
    set.iter().map(|inst| pipe.forward(&inst.x).map(|(y, _)| y)).collect()
}

/// Mini-batch Adam with seeded shuffling, early stopping on validation MSE,
/// and best-epoch restore. Deterministic given the seed: the loop is
/// single-threaded and iteration order is fixed.
pub fn train(
    pipe: &mut Pipeline,
    train_set: &[InstancePair],
    val_set: &[InstancePair],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptySet);
    }
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = pipe.flat_params();
    let mut adam = AdamState::new(params.len());
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        wall_time_s: 0.0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut streak = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = pipe.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let inst = &train_set[i];
                let (y_hat, trace) = pipe.forward(&inst.x)?;
                batch_loss += loss_mse(&y_hat, &inst.y);
                pipe.backward(&trace, &inst.y, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteActivation { epoch, batch: batch_idx });
            }
            epoch_loss += batch_loss;
            let mut g = grads.flat_params();
            let inv = 1.0 / chunk.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            adam_step(&mut params, &g, &mut adam, cfg);
            pipe.set_flat_params(&params);
        }
        history.train_loss.push(epoch_loss / train_set.len() as f64);
        let val = eval_mse(pipe, val_set)?;
        history.val_loss.push(val);
        if val < best_val {
            best_val = val;
            best_params.copy_from_slice(&params);
            history.best_epoch = epoch;
            streak = 0;
        } else {
            streak += 1;
        }
        if streak >= cfg.patience {
            break;
        }
    }
    pipe.set_flat_params(&best_params);
    history.wall_time_s = started.elapsed().as_secs_f64();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{inv_softplus, Level};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    /// Every normalizer configuration exercised by the gradient tests.
    fn normalizer_zoo(l: usize, h: usize, d: usize) -> Vec<(String, NormalizerParams)> {
        let lcd = |variant, level, individual, centered| {
            NormalizerParams::Lcd(LcdParams::new(variant, l, h, d, level, individual, centered))
        };
        vec![
            ("zscore".into(), NormalizerParams::ZScore),
            ("revin".into(), NormalizerParams::RevIn(RevInParams::new(d))),
            ("ld-point".into(), NormalizerParams::Ld(LdParams::new(l, h, d, Level::Point, false))),
            (
                "ld-instance".into(),
                NormalizerParams::Ld(LdParams::new(l, h, d, Level::Instance, false)),
            ),
            (
                "ld-point-scaled".into(),
                NormalizerParams::Ld(LdParams::new(l, h, d, Level::Point, true)),
            ),
            ("lcd-linear-point".into(), lcd(LcdVariant::Linear, Level::Point, true, true)),
            ("lcd-linear-instance".into(), lcd(LcdVariant::Linear, Level::Instance, true, true)),
            ("lcd-linear-shared".into(), lcd(LcdVariant::Linear, Level::Point, false, true)),
            ("lcd-linear-raw-input".into(), lcd(LcdVariant::Linear, Level::Point, true, false)),
            ("lcd-as-point".into(), lcd(LcdVariant::Attention, Level::Point, true, true)),
            ("lcd-as-instance".into(), lcd(LcdVariant::Attention, Level::Instance, true, true)),
        ]
    }

    fn backbone_zoo(l: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<(String, BackboneParams)> {
        vec![
            ("identity".into(), BackboneParams::identity(l, h)),
            ("linear".into(), BackboneParams::linear(l, h, d, false, rng)),
            ("dlinear".into(), BackboneParams::dlinear(l, h, d, 3, false, rng)),
            ("mlp".into(), BackboneParams::mlp(l, h, d, 6, false, rng)),
        ]
    }

    /// Give normalizer parameters a small random kick so gradcheck does not
    /// sit at special points like exact zero.
    fn perturb_normalizer(pipe: &mut Pipeline, rng: &mut ChaCha8Rng) {
        if matches!(pipe.normalizer, NormalizerParams::ZScore) {
            return;
        }
        let mut flat = pipe.flat_params();
        let norm_len = pipe.normalizer.num_params();
        for v in flat.iter_mut().take(norm_len) {
            *v += rng.random_range(-0.1..0.1);
        }
        pipe.set_flat_params(&flat);
    }

    #[test]
    fn neutral_ld_identity_backbone_is_a_round_trip() {
        let mut r = rng(1);
        let x = random_mat(6, 3, &mut r);
        let pipe = Pipeline::new(
            NormalizerParams::Ld(LdParams::new(6, 6, 3, Level::Point, false)),
            BackboneParams::identity(6, 6),
            1e-5,
        );
        let (y_hat, _) = pipe.forward(&x).unwrap();
        for (a, b) in y_hat.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_init_lcd_identity_backbone_returns_centered_input() {
        let mut r = rng(2);
        let x = random_mat(5, 2, &mut r);
        let pipe = Pipeline::new(
            NormalizerParams::Lcd(LcdParams::new(
                LcdVariant::Linear,
                5,
                5,
                2,
                Level::Point,
                true,
                true,
            )),
            BackboneParams::identity(5, 5),
            1e-5,
        );
        let (y_hat, _) = pipe.forward(&x).unwrap();
        for k in 0..2 {
            let mu = x.column(k).mean().unwrap();
            for t in 0..5 {
                assert_abs_diff_eq!(y_hat[[t, k]], x[[t, k]] - mu, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zscore_with_mean_weights_predicts_lookback_mean() {
        let mut r = rng(3);
        let x = random_mat(8, 2, &mut r);
        let head = crate::backbones::LinearHead {
            weight: Array2::from_elem((4, 8), 1.0 / 8.0),
            bias: Array1::zeros(4),
        };
        let pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::Linear { heads: vec![head.clone(), head] },
            1e-5,
        );
        let (y_hat, _) = pipe.forward(&x).unwrap();
        for k in 0..2 {
            let mu = x.column(k).mean().unwrap();
            for n in 0..4 {
                assert_abs_diff_eq!(y_hat[[n, k]], mu, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn loss_mse_textbook_cases() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(loss_mse(&a, &a), 0.0);
        let b = a.mapv(|v| v + 2.0);
        assert_eq!(loss_mse(&b, &a), 4.0);
        let y_hat = arr2(&[[0.0], [2.0]]);
        let y = arr2(&[[1.0], [0.0]]);
        assert_eq!(loss_mse(&y_hat, &y), 2.5);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let mut r = rng(4);
        let pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(6, 3, 2, false, &mut r),
            1e-5,
        );
        let x = random_mat(6, 2, &mut r);
        let (y_hat, trace) = pipe.forward(&x).unwrap();
        let mut grads = pipe.zeros_like();
        pipe.backward(&trace, &y_hat, &mut grads);
        let norm: f64 = grads.flat_params().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm at minimum: {norm}");
    }

    #[test]
    fn ld_shift_out_gradient_matches_closed_form() {
        let mut r = rng(5);
        let (l, h, d) = (5, 4, 2);
        let pipe = Pipeline::new(
            NormalizerParams::Ld(LdParams::new(l, h, d, Level::Point, false)),
            BackboneParams::linear(l, h, d, false, &mut r),
            1e-5,
        );
        let x = random_mat(l, d, &mut r);
        let y = random_mat(h, d, &mut r);
        let (y_hat, trace) = pipe.forward(&x).unwrap();
        let mut grads = pipe.zeros_like();
        pipe.backward(&trace, &y, &mut grads);
        let NormalizerParams::Ld(g) = &grads.normalizer else { unreachable!() };
        let ctx = trace.ctx.as_ref().unwrap();
        for n in 0..h {
            for k in 0..d {
                let expected = 2.0 / (h * d) as f64
                    * (y_hat[[n, k]] - y[[n, k]])
                    * (ctx.sigma_x[k] + ctx.eps);
                assert_abs_diff_eq!(g.shift_out[[n, k]], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn doubling_residuals_doubles_every_gradient() {
        let mut r = rng(6);
        let (l, h, d) = (6, 3, 2);
        let pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::mlp(l, h, d, 5, false, &mut r),
            1e-5,
        );
        let x = random_mat(l, d, &mut r);
        let y = random_mat(h, d, &mut r);
        let (y_hat, trace) = pipe.forward(&x).unwrap();

        let mut g1 = pipe.zeros_like();
        pipe.backward(&trace, &y, &mut g1);
        // Targets moved so the residual exactly doubles.
        let y2 = 2.0 * &y - &y_hat;
        let mut g2 = pipe.zeros_like();
        pipe.backward(&trace, &y2, &mut g2);
        for (a, b) in g1.flat_params().iter().zip(g2.flat_params().iter()) {
            assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn grad_check_passes_for_every_normalizer_backbone_pair() {
        let (l, h, d) = (6, 4, 2);
        for (bname, backbone) in backbone_zoo(l, h, d, &mut rng(7)) {
            for (nname, normalizer) in normalizer_zoo(l, h, d) {
                let mut pipe = Pipeline::new(normalizer, backbone.clone(), 1e-5);
                let mut r = rng(0xAB);
                perturb_normalizer(&mut pipe, &mut r);
                let x = random_mat(l, d, &mut r);
                let y = random_mat(h, d, &mut r);
                let report = grad_check(&pipe, &x, &y, 1e-5).unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{nname}+{bname}: {} at {}",
                    report.max_rel_err,
                    report.worst_index
                );
            }
        }
    }

    #[test]
    fn grad_check_is_tight_for_pure_linear_pipelines() {
        let mut r = rng(8);
        let pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(6, 3, 2, false, &mut r),
            1e-5,
        );
        let x = random_mat(6, 2, &mut r);
        let y = random_mat(3, 2, &mut r);
        let report = grad_check(&pipe, &x, &y, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-7, "{}", report.max_rel_err);
    }

    #[test]
    fn grad_check_catches_planted_fault() {
        let mut r = rng(9);
        let pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(5, 3, 2, false, &mut r),
            1e-5,
        );
        let x = random_mat(5, 2, &mut r);
        // Large targets make the largest gradient entry comfortably big.
        let y = random_mat(3, 2, &mut r) * 10.0;
        let report = grad_check_corrupted(&pipe, &x, &y, 1e-5).unwrap();
        assert!(report.max_rel_err > 0.3, "{}", report.max_rel_err);
    }

    #[test]
    fn use_scale_parameters_receive_gradient() {
        let mut r = rng(10);
        let (l, h, d) = (5, 4, 2);
        let mut params = LdParams::new(l, h, d, Level::Point, true);
        params.scale_in_raw.as_mut().unwrap()[[0, 0]] = inv_softplus(1.5);
        let pipe = Pipeline::new(
            NormalizerParams::Ld(params),
            BackboneParams::linear(l, h, d, false, &mut r),
            1e-5,
        );
        let x = random_mat(l, d, &mut r);
        let y = random_mat(h, d, &mut r);
        let (_, trace) = pipe.forward(&x).unwrap();
        let mut grads = pipe.zeros_like();
        pipe.backward(&trace, &y, &mut grads);
        let NormalizerParams::Ld(g) = &grads.normalizer else { unreachable!() };
        let nonzero = g.scale_in_raw.as_ref().unwrap().iter().any(|v| v.abs() > 1e-12)
            && g.scale_out_raw.as_ref().unwrap().iter().any(|v| v.abs() > 1e-12);
        assert!(nonzero);
    }

    #[test]
    fn flat_vector_jointly_covers_normalizer_and_backbone() {
        let mut r = rng(11);
        let (l, h, d) = (6, 4, 3);
        let pipe = Pipeline::new(
            NormalizerParams::Ld(LdParams::new(l, h, d, Level::Point, false)),
            BackboneParams::linear(l, h, d, false, &mut r),
            1e-5,
        );
        let norm_count = d * (l + h);
        assert_eq!(pipe.num_trainable(), norm_count + pipe.backbone.num_params());
        assert_eq!(pipe.flat_params().len(), pipe.num_trainable());

        // Both parameter groups see nonzero gradient on a generic batch.
        let x = random_mat(l, d, &mut r);
        let y = random_mat(h, d, &mut r);
        let (_, trace) = pipe.forward(&x).unwrap();
        let mut grads = pipe.zeros_like();
        pipe.backward(&trace, &y, &mut grads);
        let flat = grads.flat_params();
        assert!(flat[..norm_count].iter().any(|v| v.abs() > 1e-9));
        assert!(flat[norm_count..].iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn flat_round_trip_is_identity() {
        let mut r = rng(12);
        let mut pipe = Pipeline::new(
            NormalizerParams::Lcd(LcdParams::new(
                LcdVariant::Attention,
                5,
                3,
                2,
                Level::Point,
                true,
                true,
            )),
            BackboneParams::mlp(5, 3, 2, 4, false, &mut r),
            1e-5,
        );
        let flat = pipe.flat_params();
        pipe.set_flat_params(&flat);
        assert_eq!(pipe.flat_params(), flat);
        assert!(pipe.zeros_like().flat_params().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let cfg = TrainConfig::default();
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state, &cfg);
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let cfg = TrainConfig { lr: 0.05, ..TrainConfig::default() };
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[5.0], &mut state, &cfg);
        assert_abs_diff_eq!(params[0], -0.05, epsilon = 1e-8);
    }

    #[test]
    fn adam_hand_rollout_on_quadratic() {
        // f(w) = w², start w = 1, lr = 0.1.
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let mut w = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut w.clone(), &[0.0], &mut AdamState::new(1), &cfg);

        let g1 = 2.0 * w[0];
        adam_step(&mut w, &[g1], &mut state, &cfg);
        assert_abs_diff_eq!(w[0], 0.9, epsilon = 1e-8);

        let g2 = 2.0 * w[0];
        adam_step(&mut w, &[g2], &mut state, &cfg);
        assert!(w[0] < 0.9);
        assert_abs_diff_eq!(w[0], 0.800412, epsilon = 5e-6);
    }

    /// Synthetic windows whose targets are exactly linear in the z-scored
    /// lookback, pushed back to raw scale. Returns (instances, noise level).
    fn linear_task(
        n: usize,
        l: usize,
        h: usize,
        noise: f64,
        seed: u64,
    ) -> (Vec<InstancePair>, Mat, Array1<f64>) {
        let mut r = rng(seed);
        let w_true = Array2::from_shape_fn((h, l), |_| r.random_range(-0.5..0.5));
        let b_true = Array1::from_shape_fn(h, |_| r.random_range(-0.2..0.2));
        let eps = 1e-5;
        let mut set = Vec::with_capacity(n);
        for i in 0..n {
            let x = Array2::from_shape_fn((l, 1), |_| r.random_range(-1.0..3.0));
            let (x_bar, ctx) = zscore_normalize(&x, eps);
            let z = w_true.dot(&x_bar.column(0).to_owned()) + &b_true;
            let mut y = Array2::zeros((h, 1));
            for n_ in 0..h {
                let noisy = z[n_] + noise * r.random_range(-1.0..1.0);
                y[[n_, 0]] = noisy * (ctx.sigma_x[0] + eps) + ctx.mu_x[0];
            }
            set.push(InstancePair { x, y, origin_index: i });
        }
        (set, w_true, b_true)
    }

    #[test]
    fn training_reaches_the_least_squares_noise_floor() {
        let (l, h) = (6, 3);
        let (data, _, _) = linear_task(500, l, h, 0.05, 21);
        let (train_set, val_set) = data.split_at(400);

        // Closed-form weighted least squares per output row: the residual in
        // raw units is (model − target_z)·(σ+eps), so weight each instance
        // row by its scale.
        let eps = 1e-5;
        let rows = train_set.len();
        let mut floor = 0.0;
        let mut solutions = Vec::new();
        // z-scored lookbacks sum to zero over t, so the scaled lookback
        // columns are linearly dependent; drop the last one (same span).
        for out_row in 0..h {
            let mut design = Array2::zeros((rows, l));
            let mut target = Array1::zeros(rows);
            for (i, inst) in train_set.iter().enumerate() {
                let (x_bar, ctx) = zscore_normalize(&inst.x, eps);
                let c = ctx.sigma_x[0] + ctx.eps;
                for t in 0..l - 1 {
                    design[[i, t]] = x_bar[[t, 0]] * c;
                }
                design[[i, l - 1]] = c;
                target[i] = inst.y[[out_row, 0]] - ctx.mu_x[0];
            }
            let (beta, _) = crate::eval::ols_with_se(&design, &target).unwrap();
            solutions.push(beta);
        }
        let mut val_sse = 0.0;
        let mut count = 0;
        for inst in val_set {
            let (x_bar, ctx) = zscore_normalize(&inst.x, eps);
            let c = ctx.sigma_x[0] + ctx.eps;
            for (out_row, beta) in solutions.iter().enumerate() {
                let mut z = beta[l - 1];
                for t in 0..l - 1 {
                    z += beta[t] * x_bar[[t, 0]];
                }
                let pred = z * c + ctx.mu_x[0];
                let e = pred - inst.y[[out_row, 0]];
                val_sse += e * e;
                count += 1;
            }
        }
        floor += val_sse / count as f64;

        let mut pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(l, h, 1, false, &mut rng(22)),
            eps,
        );
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 32,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            ..TrainConfig::default()
        };
        let history = train(&mut pipe, train_set, val_set, &cfg).unwrap();
        let best = history.val_loss[history.best_epoch];
        assert!(
            best <= floor * 1.10,
            "trained val MSE {best} vs least-squares floor {floor}"
        );
    }

    #[test]
    fn patience_zero_stops_after_one_epoch() {
        let (data, _, _) = linear_task(60, 4, 2, 0.1, 30);
        let (train_set, val_set) = data.split_at(40);
        let mut pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(4, 2, 1, false, &mut rng(31)),
            1e-5,
        );
        let cfg = TrainConfig { patience: 0, max_epochs: 50, ..TrainConfig::default() };
        let history = train(&mut pipe, train_set, val_set, &cfg).unwrap();
        assert_eq!(history.train_loss.len(), 1);
    }

    #[test]
    fn training_is_bit_deterministic_per_seed() {
        let (data, _, _) = linear_task(80, 4, 2, 0.1, 33);
        let (train_set, val_set) = data.split_at(60);
        let run = || {
            let mut pipe = Pipeline::new(
                NormalizerParams::Ld(LdParams::new(4, 2, 1, Level::Point, false)),
                BackboneParams::linear(4, 2, 1, false, &mut rng(34)),
                1e-5,
            );
            let cfg = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
            let h = train(&mut pipe, train_set, val_set, &cfg).unwrap();
            (h.train_loss, h.val_loss, pipe.flat_params())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let (data, _, _) = linear_task(100, 5, 2, 0.3, 35);
        let (train_set, val_set) = data.split_at(70);
        let mut pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::mlp(5, 2, 1, 4, false, &mut rng(36)),
            1e-5,
        );
        let cfg =
            TrainConfig { lr: 5e-3, max_epochs: 30, patience: 5, ..TrainConfig::default() };
        let history = train(&mut pipe, train_set, val_set, &cfg).unwrap();
        let best = history.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(history.val_loss[history.best_epoch], best);
        let revalidated = eval_mse(&pipe, val_set).unwrap();
        assert_eq!(revalidated, best);
    }

    #[test]
    fn frozen_ld_trains_exactly_like_plain_zscore() {
        let (data, _, _) = linear_task(120, 5, 3, 0.2, 40);
        let (train_set, val_set) = data.split_at(90);
        let cfg = TrainConfig { max_epochs: 6, lr: 1e-3, ..TrainConfig::default() };

        let mut plain = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(5, 3, 1, false, &mut rng(41)),
            1e-5,
        );
        let mut frozen = Pipeline::new(
            NormalizerParams::Ld(LdParams::new(5, 3, 1, Level::Point, false)),
            BackboneParams::linear(5, 3, 1, false, &mut rng(41)),
            1e-5,
        );
        frozen.freeze_normalizer = true;

        let ha = train(&mut plain, train_set, val_set, &cfg).unwrap();
        let hb = train(&mut frozen, train_set, val_set, &cfg).unwrap();
        for (a, b) in ha.val_loss.iter().zip(hb.val_loss.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_lcd_variants_share_one_optimization_problem() {
        let (data, _, _) = linear_task(120, 5, 3, 0.2, 42);
        let (train_set, val_set) = data.split_at(90);
        let cfg = TrainConfig { max_epochs: 6, lr: 1e-3, ..TrainConfig::default() };
        let run = |variant| {
            let mut pipe = Pipeline::new(
                NormalizerParams::Lcd(LcdParams::new(variant, 5, 3, 1, Level::Point, true, true)),
                BackboneParams::linear(5, 3, 1, false, &mut rng(43)),
                1e-5,
            );
            pipe.freeze_normalizer = true;
            train(&mut pipe, train_set, val_set, &cfg).unwrap().val_loss
        };
        let lin = run(LcdVariant::Linear);
        let attn = run(LcdVariant::Attention);
        for (a, b) in lin.iter().zip(attn.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_targets_abort_with_location() {
        let (mut data, _, _) = linear_task(40, 4, 2, 0.1, 50);
        data[3].y[[0, 0]] = f64::INFINITY;
        let (train_set, val_set) = data.split_at(30);
        let mut pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(4, 2, 1, false, &mut rng(51)),
            1e-5,
        );
        let cfg = TrainConfig { batch_size: 64, ..TrainConfig::default() };
        match train(&mut pipe, train_set, val_set, &cfg) {
            Err(Error::NonFiniteActivation { epoch, batch }) => {
                assert_eq!((epoch, batch), (0, 0));
            }
            other => panic!("expected NonFiniteActivation, got {other:?}"),
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (data, _, _) = linear_task(10, 4, 2, 0.1, 52);
        let mut pipe = Pipeline::new(
            NormalizerParams::ZScore,
            BackboneParams::linear(4, 2, 1, false, &mut rng(53)),
            1e-5,
        );
        assert!(matches!(
            train(&mut pipe, &[], &data, &TrainConfig::default()),
            Err(Error::EmptySet)
        ));
        assert!(matches!(
            train(&mut pipe, &data, &[], &TrainConfig::default()),
            Err(Error::EmptySet)
        ));
    }
}
