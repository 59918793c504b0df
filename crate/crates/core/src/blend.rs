//! Pseudo-positive blending pipeline.
//!
//! For an anchor image: pick the nearest-landmark candidate of another
//! identity from a random pool, transfer the anchor's Lab color statistics
//! onto the candidate, blur the intersection of the two inner-face masks into
//! a soft alpha mask, and composite. The result keeps the anchor's inner face
//! on the candidate's attributes.

use crate::color::{image_to_lab, lab_to_rgb, lab_to_rgb_jacobian, rgb_to_lab_jacobian};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::num::{c, Scalar};
use crate::synth::{FaceSample, IdentityDataset};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mask values at or above this saturate to exactly 1 after blurring, so the
/// anchor's pixels pass through the composite untouched wherever the mask is
/// high-confidence.
pub const MASK_SATURATION: f64 = 0.99;

const SIGMA_EPS: f64 = 1e-6;
const MIN_REGION_PIXELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    Intersection,
    SourceOnly,
    CandidateOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorRegion {
    UnionMask,
    WholeImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    pub candidate_pool_size: usize,
    pub mask_variant: MaskVariant,
    /// Blur width in pixels; the default matches 5% of a 32-pixel image.
    pub blur_sigma: f64,
    pub color_region: ColorRegion,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            candidate_pool_size: 100,
            mask_variant: MaskVariant::Intersection,
            blur_sigma: 1.6,
            color_region: ColorRegion::UnionMask,
        }
    }
}

impl BlendConfig {
    /// Default configuration scaled to an image side length.
    pub fn for_image_size(size: usize) -> Self {
        Self { blur_sigma: 0.05 * size as f64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_pool_size < 1 {
            return Err(Error::InvalidConfig("candidate_pool_size must be >= 1".into()));
        }
        if self.blur_sigma <= 0.0 {
            return Err(Error::InvalidConfig("blur_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Odd kernel size implied by the blur width.
    pub fn blur_kernel(&self) -> usize {
        2 * (2.0 * self.blur_sigma).ceil() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSample {
    pub image: Image<f32>,
    pub blend_mask: Mask<f32>,
    pub anchor_id: u32,
    pub candidate_id: u32,
    pub candidate_index: usize,
}

/// Index of the pool sample whose landmarks are closest to the anchor's
/// (sum of squared point distances); ties go to the lowest index.
pub fn nearest_landmark_candidate(anchor: &FaceSample, pool: &[&FaceSample]) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, cand) in pool.iter().enumerate() {
        if cand.id_label == anchor.id_label {
            return Err(Error::IdentityCollision(anchor.id_label));
        }
        if cand.landmarks.len() != anchor.landmarks.len() {
            return Err(Error::ShapeMismatch(format!(
                "landmark count {} != {}",
                cand.landmarks.len(),
                anchor.landmarks.len()
            )));
        }
        let mut dist = 0.0f64;
        for (a, b) in anchor.landmarks.iter().zip(&cand.landmarks) {
            let dx = a[0] as f64 - b[0] as f64;
            let dy = a[1] as f64 - b[1] as f64;
            dist += dx * dx + dy * dy;
        }
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    Ok(best)
}

/// Pixel indices over which color statistics are computed.
fn stats_region<T: Scalar>(
    src_mask: &Mask<T>,
    cand_mask: &Mask<T>,
    region: ColorRegion,
) -> Vec<usize> {
    match region {
        ColorRegion::WholeImage => (0..src_mask.data.len()).collect(),
        ColorRegion::UnionMask => {
            let half = c::<T>(0.5);
            (0..src_mask.data.len())
                .filter(|&i| src_mask.data[i].max(cand_mask.data[i]) >= half)
                .collect()
        }
    }
}

/// Per-channel mean and standard deviation of a Lab buffer over a pixel set.
/// Accumulates in f64 regardless of the image scalar type.
pub fn color_stats<T: Scalar>(lab: &Image<T>, region: &[usize]) -> ColorStats {
    let n = region.len() as f64;
    let mut mu = [0.0f64; 3];
    for &p in region {
        for ch in 0..3 {
            mu[ch] += lab.data[p * 3 + ch].as_f64();
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut var = [0.0f64; 3];
    for &p in region {
        for ch in 0..3 {
            let d = lab.data[p * 3 + ch].as_f64() - mu[ch];
            var[ch] += d * d;
        }
    }
    let sigma = [(var[0] / n).sqrt(), (var[1] / n).sqrt(), (var[2] / n).sqrt()];
    ColorStats { mu, sigma }
}

/// Re-normalizes the candidate so its Lab statistics over the selected region
/// match the source's. The affine map is applied to every pixel.
pub fn transfer_color_images<T: Scalar>(
    src: &Image<T>,
    src_mask: &Mask<T>,
    cand: &Image<T>,
    cand_mask: &Mask<T>,
    cfg: &BlendConfig,
) -> Result<Image<T>> {
    if !src.same_shape(cand) {
        return Err(Error::ShapeMismatch("color transfer inputs differ in shape".into()));
    }
    let region = stats_region(src_mask, cand_mask, cfg.color_region);
    if region.len() < MIN_REGION_PIXELS {
        return Err(Error::DegenerateRegion(region.len()));
    }
    let src_lab = image_to_lab(src);
    let cand_lab = image_to_lab(cand);
    let s_stats = color_stats(&src_lab, &region);
    let c_stats = color_stats(&cand_lab, &region);

    let mut gain = [0.0f64; 3];
    for ch in 0..3 {
        gain[ch] = s_stats.sigma[ch] / c_stats.sigma[ch].max(SIGMA_EPS);
    }

    let mut out = Image::zeros(src.height, src.width, 3);
    for p in 0..src.height * src.width {
        let mut lab = [T::zero(); 3];
        for ch in 0..3 {
            let v = cand_lab.data[p * 3 + ch].as_f64();
            lab[ch] = T::from_f64((v - c_stats.mu[ch]) * gain[ch] + s_stats.mu[ch]);
        }
        let rgb = lab_to_rgb(lab);
        out.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(out)
}

/// Pulls a cotangent on the transfer output back to the candidate image.
/// The source image only contributes constants (its statistics).
pub fn transfer_color_vjp_candidate<T: Scalar>(
    src: &Image<T>,
    src_mask: &Mask<T>,
    cand: &Image<T>,
    cand_mask: &Mask<T>,
    cfg: &BlendConfig,
    d_out: &Image<T>,
) -> Result<Image<T>> {
    let region = stats_region(src_mask, cand_mask, cfg.color_region);
    if region.len() < MIN_REGION_PIXELS {
        return Err(Error::DegenerateRegion(region.len()));
    }
    let n = region.len() as f64;
    let src_lab = image_to_lab(src);
    let cand_lab = image_to_lab(cand);
    let s_stats = color_stats(&src_lab, &region);
    let c_stats = color_stats(&cand_lab, &region);
    let mut gain = [0.0f64; 3];
    for ch in 0..3 {
        gain[ch] = s_stats.sigma[ch] / c_stats.sigma[ch].max(SIGMA_EPS);
    }

    let npix = cand.height * cand.width;
    // Cotangent on the output Lab values, through the Lab->RGB conversion.
    let mut d_lab_out = vec![0.0f64; npix * 3];
    for p in 0..npix {
        let mut lab = [T::zero(); 3];
        for ch in 0..3 {
            let v = cand_lab.data[p * 3 + ch].as_f64();
            lab[ch] = T::from_f64((v - c_stats.mu[ch]) * gain[ch] + s_stats.mu[ch]);
        }
        let jac = lab_to_rgb_jacobian(lab);
        for col in 0..3 {
            let mut acc = 0.0f64;
            for row in 0..3 {
                acc += jac[row][col].as_f64() * d_out.data[p * 3 + row].as_f64();
            }
            d_lab_out[p * 3 + col] = acc;
        }
    }

    // Direct per-pixel term plus the coupling through mu/sigma of the region.
    let mut d_lab = vec![0.0f64; npix * 3];
    let mut d_gain = [0.0f64; 3];
    let mut d_mu = [0.0f64; 3];
    for p in 0..npix {
        for ch in 0..3 {
            let g = d_lab_out[p * 3 + ch];
            d_lab[p * 3 + ch] += g * gain[ch];
            d_gain[ch] += g * (cand_lab.data[p * 3 + ch].as_f64() - c_stats.mu[ch]);
            d_mu[ch] -= g * gain[ch];
        }
    }
    for ch in 0..3 {
        let d_sigma = if c_stats.sigma[ch] > SIGMA_EPS {
            -d_gain[ch] * s_stats.sigma[ch] / (c_stats.sigma[ch] * c_stats.sigma[ch])
        } else {
            0.0
        };
        for &q in &region {
            d_lab[q * 3 + ch] += d_mu[ch] / n;
            if c_stats.sigma[ch] > SIGMA_EPS {
                let dev = cand_lab.data[q * 3 + ch].as_f64() - c_stats.mu[ch];
                d_lab[q * 3 + ch] += d_sigma * dev / (n * c_stats.sigma[ch]);
            }
        }
    }

    let mut d_cand = Image::zeros(cand.height, cand.width, 3);
    for p in 0..npix {
        let jac = rgb_to_lab_jacobian(cand.rgb(p / cand.width, p % cand.width));
        for col in 0..3 {
            let mut acc = 0.0f64;
            for row in 0..3 {
                acc += jac[row][col].as_f64() * d_lab[p * 3 + row];
            }
            d_cand.data[p * 3 + col] = T::from_f64(acc);
        }
    }
    Ok(d_cand)
}

/// Spec-named wrapper over [`transfer_color_images`].
pub fn transfer_color(
    source: &FaceSample,
    candidate: &FaceSample,
    cfg: &BlendConfig,
) -> Result<Image<f32>> {
    transfer_color_images(
        &source.image,
        &source.inner_mask,
        &candidate.image,
        &candidate.inner_mask,
        cfg,
    )
}

/// Normalized 1-D Gaussian taps for the configured sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> =
        (-radius..=radius).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

fn reflect(i: i64, len: i64) -> usize {
    // Mirror without repeating the border sample: -1 -> 1, len -> len - 2.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_mask<T: Scalar>(mask: &Mask<T>, sigma: f64) -> Mask<T> {
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut rows = vec![0.0f64; mask.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                let xx = reflect(x + t as i64 - radius, w);
                acc += tap * mask.data[(y * w) as usize + xx].as_f64();
            }
            rows[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Mask::zeros(mask.height, mask.width);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                let yy = reflect(y + t as i64 - radius, h);
                acc += tap * rows[yy * w as usize + x as usize];
            }
            out.data[(y * w + x) as usize] = T::from_f64(acc);
        }
    }
    out
}

/// Builds the soft blend mask: variant-selected base, Gaussian blur with
/// reflect padding, clamp to [0, 1], and saturation of near-1 values.
pub fn make_blend_mask<T: Scalar>(
    m_src: &Mask<T>,
    m_cand: &Mask<T>,
    cfg: &BlendConfig,
) -> Result<Mask<T>> {
    if !m_src.same_shape(m_cand) {
        return Err(Error::ShapeMismatch("mask shapes differ".into()));
    }
    cfg.validate()?;
    let base = match cfg.mask_variant {
        MaskVariant::Intersection => Mask {
            height: m_src.height,
            width: m_src.width,
            data: m_src.data.iter().zip(&m_cand.data).map(|(&a, &b)| a * b).collect(),
        },
        MaskVariant::SourceOnly => m_src.clone(),
        MaskVariant::CandidateOnly => m_cand.clone(),
    };
    let mut blurred = blur_mask(&base, cfg.blur_sigma);
    let saturate = c::<T>(MASK_SATURATION);
    for v in &mut blurred.data {
        let clamped = (*v).max(T::zero()).min(T::one());
        *v = if clamped >= saturate { T::one() } else { clamped };
    }
    Ok(blurred)
}

/// Alpha composite: `src * mask + cand * (1 - mask)` pointwise.
pub fn blend<T: Scalar>(src: &Image<T>, cand: &Image<T>, mask: &Mask<T>) -> Result<Image<T>> {
    if !src.same_shape(cand) || src.height != mask.height || src.width != mask.width {
        return Err(Error::ShapeMismatch("blend inputs differ in shape".into()));
    }
    let mut out = Image::zeros(src.height, src.width, src.channels);
    for p in 0..mask.data.len() {
        let m = mask.data[p];
        let inv = T::one() - m;
        for ch in 0..src.channels {
            let i = p * src.channels + ch;
            out.data[i] = (src.data[i] * m + cand.data[i] * inv).max(T::zero()).min(T::one());
        }
    }
    Ok(out)
}

/// Cotangent of [`blend`] with respect to the candidate image.
pub fn blend_vjp_candidate<T: Scalar>(mask: &Mask<T>, d_out: &Image<T>) -> Image<T> {
    let mut d_cand = Image::zeros(d_out.height, d_out.width, d_out.channels);
    for p in 0..mask.data.len() {
        let inv = T::one() - mask.data[p];
        for ch in 0..d_out.channels {
            let i = p * d_out.channels + ch;
            d_cand.data[i] = d_out.data[i] * inv;
        }
    }
    d_cand
}

/// Color-matches and composites a specific candidate onto the anchor.
pub fn blend_pair(
    anchor: &FaceSample,
    candidate: &FaceSample,
    candidate_index: usize,
    cfg: &BlendConfig,
) -> Result<BlendedSample> {
    let recolored = transfer_color(anchor, candidate, cfg)?;
    let mask = make_blend_mask(&anchor.inner_mask, &candidate.inner_mask, cfg)?;
    let image = blend(&anchor.image, &recolored, &mask)?;
    Ok(BlendedSample {
        image,
        blend_mask: mask,
        anchor_id: anchor.id_label,
        candidate_id: candidate.id_label,
        candidate_index,
    })
}

/// Full pipeline: sample a pool of other-identity images, pick the nearest
/// landmark candidate, color-transfer, and composite.
pub fn pseudo_positive(
    anchor: &FaceSample,
    dataset: &IdentityDataset,
    rng: &mut ChaCha8Rng,
    cfg: &BlendConfig,
) -> Result<BlendedSample> {
    cfg.validate()?;
    let others: Vec<usize> = (0..dataset.samples.len())
        .filter(|&i| dataset.samples[i].id_label != anchor.id_label)
        .collect();
    if others.len() < cfg.candidate_pool_size {
        return Err(Error::InsufficientPool { need: cfg.candidate_pool_size, have: others.len() });
    }
    let picks = rand::seq::index::sample(rng, others.len(), cfg.candidate_pool_size);
    let pool_indices: Vec<usize> = picks.iter().map(|k| others[k]).collect();
    let pool: Vec<&FaceSample> = pool_indices.iter().map(|&i| &dataset.samples[i]).collect();
    let best = nearest_landmark_candidate(anchor, &pool)?;
    let candidate_index = pool_indices[best];
    blend_pair(anchor, &dataset.samples[candidate_index], candidate_index, cfg)
}
