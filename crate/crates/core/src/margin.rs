//! Additive angular-margin classification loss on normalized embeddings.
//!
//! The target-class logit is `s * cos(theta + m)` with `cos(theta + m)`
//! expanded as `cos(theta) cos(m) - sin(theta) sin(m)` and
//! `sin(theta) = sqrt(max(1 - cos^2, 0))`; the other classes keep
//! `s * cos(theta_k)`. Head rows are renormalized to unit norm before every
//! evaluation and the gradient flows through that renormalization.

use crate::error::{Error, Result};
use crate::net::Tensor;
use crate::num::{c, Scalar};
use serde::{Deserialize, Serialize};

const HEAD_NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Logit scale s.
    pub scale: f64,
    /// Additive angular margin m, radians.
    pub margin: f64,
    /// Class count K.
    pub classes: usize,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { scale: 8.0, margin: 0.3, classes: 200 }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::InvalidConfig("margin scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig("margin must lie in [0, pi/2)".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("margin head needs at least 2 classes".into()));
        }
        Ok(())
    }
}

pub struct MarginLossOutput<T> {
    /// Mean per-sample loss over the batch.
    pub loss: T,
    pub d_embeddings: Tensor<T>,
    pub d_head: Tensor<T>,
    /// Batch samples whose nearest head row (no margin) matches the label.
    pub correct: usize,
}

/// Unit-normalized head rows plus the original norms.
pub(crate) fn normalize_head<T: Scalar>(head: &Tensor<T>, d: usize) -> (Vec<T>, Vec<T>) {
    let k = head.len() / d;
    let mut rows = head.data.clone();
    let mut norms = vec![T::zero(); k];
    for (ki, norm) in norms.iter_mut().enumerate() {
        let row = &mut rows[ki * d..(ki + 1) * d];
        let mut n = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        if n < c(HEAD_NORM_GUARD) {
            n = c(HEAD_NORM_GUARD);
        }
        for v in row.iter_mut() {
            *v /= n;
        }
        *norm = n;
    }
    (rows, norms)
}

pub(crate) struct SampleMargin<T> {
    pub loss: T,
    /// dL/d(embedding), unscaled by the batch size.
    pub d_emb: Vec<T>,
    /// Per-class coefficients: dL/d(cos_k) summed with the logit slope, so
    /// the head-row cotangent is `coef[k] * embedding`.
    pub coef: Vec<T>,
    pub predicted: usize,
}

/// Loss and cotangents for one sample against an already-normalized head.
pub(crate) fn margin_sample<T: Scalar>(
    emb: &[T],
    label: usize,
    norm_head: &[T],
    cfg: &MarginConfig,
) -> SampleMargin<T> {
    let d = emb.len();
    let k = cfg.classes;
    let s = c::<T>(cfg.scale);
    let cos_m = c::<T>(cfg.margin.cos());
    let sin_m = c::<T>(cfg.margin.sin());

    let mut cos = vec![T::zero(); k];
    for (ki, ck) in cos.iter_mut().enumerate() {
        let row = &norm_head[ki * d..(ki + 1) * d];
        let mut acc = T::zero();
        for (e, w) in emb.iter().zip(row) {
            acc += *e * *w;
        }
        *ck = acc;
    }
    let predicted = (0..k).fold(0usize, |best, ki| if cos[ki] > cos[best] { ki } else { best });

    let cos_y = cos[label];
    let sin_y = (T::one() - cos_y * cos_y).max(T::zero()).sqrt();
    // d(cos(theta + m))/d(cos theta); at the sin clamp the margin term's
    // slope is taken as zero.
    let target_slope = if sin_y > T::zero() {
        s * (cos_m + sin_m * cos_y / sin_y)
    } else {
        s * cos_m
    };

    let mut logits = vec![T::zero(); k];
    for ki in 0..k {
        logits[ki] =
            if ki == label { s * (cos_y * cos_m - sin_y * sin_m) } else { s * cos[ki] };
    }
    let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut denom = T::zero();
    for &z in &logits {
        denom += (z - mx).exp();
    }
    let log_denom = denom.ln();
    let loss = log_denom - (logits[label] - mx);

    let mut d_emb = vec![T::zero(); d];
    let mut coef = vec![T::zero(); k];
    for ki in 0..k {
        let p = (logits[ki] - mx).exp() / denom;
        let g = if ki == label { p - T::one() } else { p };
        let slope = if ki == label { target_slope } else { s };
        let ck = g * slope;
        coef[ki] = ck;
        let row = &norm_head[ki * d..(ki + 1) * d];
        for (de, w) in d_emb.iter_mut().zip(row) {
            *de += ck * *w;
        }
    }

    SampleMargin { loss, d_emb, coef, predicted }
}

/// Pulls a cotangent on the normalized head rows back to the raw head.
pub(crate) fn head_norm_vjp<T: Scalar>(
    norm_head: &[T],
    norms: &[T],
    d_norm_head: &[T],
    d: usize,
) -> Tensor<T> {
    let k = norms.len();
    let mut out = Tensor::zeros(&[k, d]);
    for ki in 0..k {
        let w = &norm_head[ki * d..(ki + 1) * d];
        let g = &d_norm_head[ki * d..(ki + 1) * d];
        let dot = w.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let dst = &mut out.data[ki * d..(ki + 1) * d];
        for i in 0..d {
            dst[i] = (g[i] - w[i] * dot) / norms[ki];
        }
    }
    out
}

/// Batch margin loss: mean per-sample loss plus analytic cotangents for the
/// embeddings and the raw (un-normalized) head matrix.
pub fn margin_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[u32],
    head: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<MarginLossOutput<T>> {
    cfg.validate()?;
    if embeddings.shape.len() != 2 {
        return Err(Error::ShapeMismatch("embeddings must be [batch, d]".into()));
    }
    let (b, d) = (embeddings.shape[0], embeddings.shape[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch("labels length != batch".into()));
    }
    if head.shape != [cfg.classes, d] {
        return Err(Error::ShapeMismatch(format!(
            "head shape {:?}, expected [{}, {}]",
            head.shape, cfg.classes, d
        )));
    }
    for &l in labels {
        if l as usize >= cfg.classes {
            return Err(Error::LabelOutOfRange { label: l, classes: cfg.classes });
        }
    }

    let (norm_head, norms) = normalize_head(head, d);
    let inv_b = T::one() / c::<T>(b as f64);
    let mut loss = T::zero();
    let mut correct = 0usize;
    let mut d_embeddings = Tensor::zeros(&[b, d]);
    let mut d_norm_head = vec![T::zero(); cfg.classes * d];

    for i in 0..b {
        let emb = &embeddings.data[i * d..(i + 1) * d];
        let out = margin_sample(emb, labels[i] as usize, &norm_head, cfg);
        loss += out.loss * inv_b;
        if out.predicted == labels[i] as usize {
            correct += 1;
        }
        let dst = &mut d_embeddings.data[i * d..(i + 1) * d];
        for (x, &g) in dst.iter_mut().zip(&out.d_emb) {
            *x = g * inv_b;
        }
        for (ki, &ck) in out.coef.iter().enumerate() {
            let row = &mut d_norm_head[ki * d..(ki + 1) * d];
            let scaled = ck * inv_b;
            for (r, &e) in row.iter_mut().zip(emb) {
                *r += scaled * e;
            }
        }
    }

    let d_head = head_norm_vjp(&norm_head, &norms, &d_norm_head, d);
    Ok(MarginLossOutput { loss, d_embeddings, d_head, correct })
}
