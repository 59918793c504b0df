//! Face-swapping loss suite over an abstract swapper.
//!
//! The generator stays abstract behind [`Swapper`]; the shipped
//! implementation is [`OracleBlender`], the analytic blending pipeline, which
//! also provides the exact cotangent of its output with respect to the target
//! image so every loss here is gradient-checkable end to end.

use crate::blend::{
    blend, blend_vjp_candidate, make_blend_mask, transfer_color_images,
    transfer_color_vjp_candidate, BlendConfig,
};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::net::{self, EncoderParams, Tensor};
use crate::num::{c, Scalar};
use crate::synth::{FaceSample, IdentityDataset};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BCE_EPS: f64 = 1e-7;

/// Loss-term weights; the identity, reconstruction, and cycle coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_rec: f64,
    pub lambda_cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_id: 10.0, lambda_rec: 5.0, lambda_cyc: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_id < 0.0 || self.lambda_rec < 0.0 || self.lambda_cyc < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sum reductions follow the loss definitions literally; mean variants are
/// available behind this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn scale<T: Scalar>(&self, count: usize) -> T {
        match self {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / c(count as f64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwapPair {
    pub source: FaceSample,
    pub target: FaceSample,
    pub same_identity: bool,
}

/// Abstract face swapper: produces the swapped image and its blending mask.
/// Masks ride along with the images because the oracle substitutes ground
/// truth for a learned mask predictor.
pub trait Swapper<T: Scalar> {
    fn swap(
        &self,
        source: &Image<T>,
        source_mask: &Mask<T>,
        target: &Image<T>,
        target_mask: &Mask<T>,
    ) -> Result<(Image<T>, Mask<T>)>;

    /// Pullback of a cotangent on the swapped image to the target image.
    fn swap_vjp_target(
        &self,
        source: &Image<T>,
        source_mask: &Mask<T>,
        target: &Image<T>,
        target_mask: &Mask<T>,
        d_out: &Image<T>,
    ) -> Result<Image<T>>;
}

/// The analytic blending pipeline as a swapper.
#[derive(Debug, Clone, Default)]
pub struct OracleBlender {
    pub cfg: BlendConfig,
}

impl<T: Scalar> Swapper<T> for OracleBlender {
    fn swap(
        &self,
        source: &Image<T>,
        source_mask: &Mask<T>,
        target: &Image<T>,
        target_mask: &Mask<T>,
    ) -> Result<(Image<T>, Mask<T>)> {
        let recolored = transfer_color_images(source, source_mask, target, target_mask, &self.cfg)?;
        let mask = make_blend_mask(source_mask, target_mask, &self.cfg)?;
        let out = blend(source, &recolored, &mask)?;
        Ok((out, mask))
    }

    fn swap_vjp_target(
        &self,
        source: &Image<T>,
        source_mask: &Mask<T>,
        target: &Image<T>,
        target_mask: &Mask<T>,
        d_out: &Image<T>,
    ) -> Result<Image<T>> {
        let mask = make_blend_mask(source_mask, target_mask, &self.cfg)?;
        let d_recolored = blend_vjp_candidate(&mask, d_out);
        transfer_color_vjp_candidate(source, source_mask, target, target_mask, &self.cfg, &d_recolored)
    }
}

/// Cosine identity loss on two unit embeddings.
pub(crate) fn embedding_cosine_loss<T: Scalar>(e_src: &[T], e_y: &[T]) -> T {
    let dot = e_src.iter().zip(e_y).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    T::one() - dot
}

/// Identity distance `1 - cos(E(x_src), E(y))` plus its gradient with respect
/// to the generated image `y`, backpropagated through the encoder.
pub fn id_loss<T: Scalar>(
    params: &EncoderParams<T>,
    x_src: &Image<T>,
    y: &Image<T>,
) -> Result<(T, Image<T>)> {
    let batch = net::images_to_batch(&[x_src, y])?;
    let emb = net::forward(params, &batch)?;
    let d = params.arch.d_emb;
    let (e_src, e_y) = emb.data.split_at(d);
    let loss = embedding_cosine_loss(e_src, e_y);

    let mut d_emb = Tensor::zeros(&[2, d]);
    for (g, &v) in d_emb.data[d..].iter_mut().zip(e_src) {
        *g = -v;
    }
    let (_, d_batch) = net::backward(params, &batch, &d_emb)?;
    Ok((loss, net::batch_grad_to_image(&d_batch, 1)))
}

/// Binary cross entropy between a predicted and ground-truth mask, with the
/// prediction clamped to `[eps, 1 - eps]`. Returns the loss and its gradient
/// with respect to the prediction.
pub fn mask_bce<T: Scalar>(
    pred: &Mask<T>,
    gt: &Mask<T>,
    reduction: Reduction,
) -> Result<(T, Mask<T>)> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch("mask shapes differ".into()));
    }
    let lo = c::<T>(BCE_EPS);
    let hi = T::one() - lo;
    let scale = reduction.scale::<T>(pred.data.len());
    let mut loss = T::zero();
    let mut grad = Mask::zeros(pred.height, pred.width);
    for (i, (&p, &m)) in pred.data.iter().zip(&gt.data).enumerate() {
        let pc = p.max(lo).min(hi);
        loss -= m * pc.ln() + (T::one() - m) * (T::one() - pc).ln();
        if p > lo && p < hi {
            grad.data[i] = (-(m / pc) + (T::one() - m) / (T::one() - pc)) * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// L1 reconstruction against the target when the pair shares an identity,
/// exactly zero otherwise. Returns the gradient with respect to `y`.
pub fn rec_loss_images<T: Scalar>(
    same_identity: bool,
    x_t: &Image<T>,
    y: &Image<T>,
    reduction: Reduction,
) -> Result<(T, Image<T>)> {
    if !x_t.same_shape(y) {
        return Err(Error::ShapeMismatch("reconstruction inputs differ in shape".into()));
    }
    let mut grad = Image::zeros(y.height, y.width, y.channels);
    if !same_identity {
        return Ok((T::zero(), grad));
    }
    let scale = reduction.scale::<T>(y.data.len());
    let mut loss = T::zero();
    for (i, (&t, &v)) in x_t.data.iter().zip(&y.data).enumerate() {
        let diff = v - t;
        loss += diff.abs();
        grad.data[i] = diff.signum() * scale;
        if diff == T::zero() {
            grad.data[i] = T::zero();
        }
    }
    Ok((loss * scale, grad))
}

/// Spec-named wrapper on a [`SwapPair`].
pub fn rec_loss(pair: &SwapPair, y: &Image<f32>, reduction: Reduction) -> Result<(f32, Image<f32>)> {
    rec_loss_images(pair.same_identity, &pair.target.image, y, reduction)
}

/// Draws a source/target pair: with probability `p_same`, two distinct images
/// of one identity; otherwise images of two different identities.
pub fn sample_pair(
    dataset: &IdentityDataset,
    rng: &mut ChaCha8Rng,
    p_same: f64,
) -> Result<SwapPair> {
    if !(0.0..=1.0).contains(&p_same) {
        return Err(Error::InvalidConfig("p_same must lie in [0, 1]".into()));
    }
    let k = dataset.num_identities();
    if rng.gen::<f64>() < p_same {
        let identity = rng.gen_range(0..k);
        let idxs = &dataset.by_identity[identity];
        if idxs.len() < 2 {
            return Err(Error::TooFewImages(identity as u32));
        }
        let picks = rand::seq::index::sample(rng, idxs.len(), 2);
        Ok(SwapPair {
            source: dataset.samples[idxs[picks.index(0)]].clone(),
            target: dataset.samples[idxs[picks.index(1)]].clone(),
            same_identity: true,
        })
    } else {
        let a = rng.gen_range(0..k);
        let mut b = rng.gen_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let pick = |rng: &mut ChaCha8Rng, idxs: &[usize]| idxs[rng.gen_range(0..idxs.len())];
        let src = pick(rng, &dataset.by_identity[a]);
        let tgt = pick(rng, &dataset.by_identity[b]);
        Ok(SwapPair {
            source: dataset.samples[src].clone(),
            target: dataset.samples[tgt].clone(),
            same_identity: false,
        })
    }
}

/// Cycle consistency: swap the target's face back onto the generated image
/// and compare with the target.
pub fn cycle_loss<T: Scalar>(
    swapper: &dyn Swapper<T>,
    x_t: &Image<T>,
    x_t_mask: &Mask<T>,
    y: &Image<T>,
    y_mask: &Mask<T>,
    reduction: Reduction,
) -> Result<(T, Image<T>)> {
    let (cycled, _) = swapper.swap(x_t, x_t_mask, y, y_mask)?;
    let scale = reduction.scale::<T>(y.data.len());
    let mut loss = T::zero();
    let mut d_cycled = Image::zeros(y.height, y.width, y.channels);
    for (i, (&t, &g)) in x_t.data.iter().zip(&cycled.data).enumerate() {
        let diff = g - t;
        loss += diff.abs();
        d_cycled.data[i] = if diff == T::zero() { T::zero() } else { diff.signum() * scale };
    }
    let d_y = swapper.swap_vjp_target(x_t, x_t_mask, y, y_mask, &d_cycled)?;
    Ok((loss * scale, d_y))
}

/// Per-term loss values for one pair. The adversarial term has no formula
/// here; it stays a pluggable zero and is reported as excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id_loss: f64,
    pub mask_loss: f64,
    pub rec_loss: f64,
    pub cyc_loss: f64,
    pub total: f64,
    pub adv_included: bool,
}

/// Weighted total: `mask + l1*id + l2*rec + l3*cyc` plus the pluggable
/// adversarial addend (zero unless a value is supplied).
pub fn total_loss(id: f64, mask: f64, rec: f64, cyc: f64, w: &LossWeights, adv: Option<f64>) -> f64 {
    adv.unwrap_or(0.0) + mask + w.lambda_id * id + w.lambda_rec * rec + w.lambda_cyc * cyc
}

/// Output compositing: the appendix contract is pointwise identical to the
/// pipeline blend, re-exposed under its own name.
pub fn composite_output<T: Scalar>(
    foreground: &Image<T>,
    x_t: &Image<T>,
    mask: &Mask<T>,
) -> Result<Image<T>> {
    blend(foreground, x_t, mask)
}

/// Evaluates all loss terms for one pair with the oracle swapper. The
/// predicted mask is supervised against the target's inner mask.
pub fn evaluate_pair(
    params: &EncoderParams<f32>,
    oracle: &OracleBlender,
    pair: &SwapPair,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<LossReport> {
    let (y, pred_mask) = oracle.swap(
        &pair.source.image,
        &pair.source.inner_mask,
        &pair.target.image,
        &pair.target.inner_mask,
    )?;
    let (id, _) = id_loss(params, &pair.source.image, &y)?;
    let (mask, _) = mask_bce(&pred_mask, &pair.target.inner_mask, reduction)?;
    let (rec, _) = rec_loss(pair, &y, reduction)?;
    let (cyc, _) =
        cycle_loss(oracle, &pair.target.image, &pair.target.inner_mask, &y, &pred_mask, reduction)?;
    let (id, mask, rec, cyc) = (id as f64, mask as f64, rec as f64, cyc as f64);
    Ok(LossReport {
        id_loss: id,
        mask_loss: mask,
        rec_loss: rec,
        cyc_loss: cyc,
        total: total_loss(id, mask, rec, cyc, weights, None),
        adv_included: false,
    })
}
