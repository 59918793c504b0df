//! Procedural face-like image universe.
//!
//! Identity latents control the inner face (an ellipse with eye, nose, and
//! mouth blobs); attribute latents control everything outside it (head shape,
//! hair band, background). The per-identity attribute anchor plus the `rho`
//! knob create the identity-attribute correlation that real face datasets
//! exhibit; at `rho = 1` every image of an identity shares one attribute
//! vector, at `rho = 0` attributes are independent of identity.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seeding::{derive_seed, rng_at};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const DOMAIN_PROFILE: u64 = 0x01;
const DOMAIN_SAMPLE: u64 = 0x02;
// Renderer projection constants: fixed for all datasets so that encoders
// trained on one shard transfer to any other shard of the same universe.
const PROJ_ID: u64 = 0x7a11_5eed_0000_0001;
const PROJ_ATTR: u64 = 0x7a11_5eed_0000_0002;

/// Number of landmarks: 12 head-boundary points plus 4 feature centers.
pub const BOUNDARY_LANDMARKS: usize = 12;
pub const FEATURE_LANDMARKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub d_id: usize,
    pub d_attr: usize,
    pub rho: f64,
    pub landmark_count: usize,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            num_identities: 200,
            images_per_identity: 40,
            d_id: 8,
            d_attr: 6,
            rho: 0.9,
            landmark_count: BOUNDARY_LANDMARKS + FEATURE_LANDMARKS,
            master_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(format!("image_size {} < 16", self.image_size)));
        }
        if self.channels != 3 {
            return Err(Error::InvalidConfig("channels must be 3".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.num_identities < 2 {
            return Err(Error::InvalidConfig("num_identities must be >= 2".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::InvalidConfig("images_per_identity must be >= 2".into()));
        }
        if self.d_id == 0 || self.d_attr == 0 {
            return Err(Error::InvalidConfig("latent dimensions must be positive".into()));
        }
        if self.landmark_count != BOUNDARY_LANDMARKS + FEATURE_LANDMARKS {
            return Err(Error::InvalidConfig(format!(
                "landmark_count must be {}",
                BOUNDARY_LANDMARKS + FEATURE_LANDMARKS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityProfile {
    pub id_label: u32,
    pub z_id: Vec<f32>,
    pub attr_anchor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub image: Image<f32>,
    pub landmarks: Vec<[f32; 2]>,
    pub inner_mask: Mask<f32>,
    pub id_label: u32,
    pub z_attr: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct IdentityDataset {
    pub samples: Vec<FaceSample>,
    /// identity label -> indices into `samples`
    pub by_identity: Vec<Vec<usize>>,
    pub config: SynthConfig,
}

impl IdentityDataset {
    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (label, idxs) in self.by_identity.iter().enumerate() {
            if idxs.len() < 2 {
                return Err(Error::TooFewImages(label as u32));
            }
            for &i in idxs {
                if self.samples[i].id_label != label as u32 {
                    return Err(Error::DatasetMismatch(format!(
                        "index entry {label} points at sample with label {}",
                        self.samples[i].id_label
                    )));
                }
            }
        }
        let indexed: usize = self.by_identity.iter().map(Vec::len).sum();
        if indexed != self.samples.len() {
            return Err(Error::DatasetMismatch("index does not cover all samples".into()));
        }
        Ok(())
    }
}

fn draw_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Draws a fresh identity profile from the stream.
pub fn sample_identity(rng: &mut ChaCha8Rng, id_label: u32, cfg: &SynthConfig) -> IdentityProfile {
    IdentityProfile {
        id_label,
        z_id: draw_normals(rng, cfg.d_id),
        attr_anchor: draw_normals(rng, cfg.d_attr),
    }
}

/// Smooth bounded map from a latent vector to a named scalar in (-1, 1).
/// The projection weights are fixed pseudo-random constants of the renderer.
fn latent_param(domain: u64, param: u64, z: &[f32]) -> f64 {
    let scale = (3.0 / z.len() as f64).sqrt();
    let mut acc = 0.0;
    for (k, &v) in z.iter().enumerate() {
        let h = derive_seed(domain, &[param, k as u64]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        acc += (2.0 * u - 1.0) * scale * v as f64;
    }
    acc.tanh()
}

struct InnerGeom {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    base: [f64; 3],
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    eye_color: [f64; 3],
    nose_dx: f64,
    nose_r: f64,
    nose_color: [f64; 3],
    mouth_dy: f64,
    mouth_rx: f64,
    mouth_ry: f64,
    mouth_color: [f64; 3],
}

impl InnerGeom {
    fn from_latent(z_id: &[f32], size: f64) -> Self {
        let p = |i: u64| latent_param(PROJ_ID, i, z_id);
        let center = (size - 1.0) / 2.0;
        // Feature centers stay well inside the ellipse: after intersecting
        // two inner masks and blurring, the high-confidence blend region
        // shrinks by a few pixels, and the identity-bearing blobs must stay
        // inside it.
        Self {
            cx: center + 0.02 * size * p(0),
            cy: center + 0.02 * size * p(1),
            a: size * (0.30 + 0.03 * p(2)),
            b: size * (0.34 + 0.03 * p(3)),
            base: [0.5 + 0.35 * p(4), 0.5 + 0.35 * p(5), 0.5 + 0.35 * p(6)],
            eye_dx: 0.34 + 0.06 * p(7),
            eye_dy: 0.28 + 0.06 * p(8),
            eye_r: size * (0.045 + 0.015 * p(9)),
            eye_color: [0.12 + 0.08 * p(10), 0.12 + 0.08 * p(11), 0.15 + 0.10 * p(12)],
            nose_dx: 0.05 * p(13),
            nose_r: size * (0.05 + 0.02 * p(14)),
            nose_color: [0.65 + 0.20 * p(15), 0.55 + 0.20 * p(16), 0.45 + 0.20 * p(17)],
            mouth_dy: 0.42 + 0.06 * p(18),
            mouth_rx: size * (0.10 + 0.03 * p(19)),
            mouth_ry: size * (0.035 + 0.01 * p(20)),
            mouth_color: [0.45 + 0.25 * p(21), 0.18 + 0.08 * p(22), 0.20 + 0.08 * p(23)],
        }
    }

    /// Feature centers: left eye, right eye, nose, mouth.
    fn feature_centers(&self) -> [[f64; 2]; FEATURE_LANDMARKS] {
        let ex = self.eye_dx * self.a;
        let ey = self.eye_dy * self.b;
        [
            [self.cx - ex, self.cy - ey],
            [self.cx + ex, self.cy - ey],
            [self.cx + self.nose_dx * self.a, self.cy + 0.05 * self.b],
            [self.cx, self.cy + self.mouth_dy * self.b],
        ]
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let centers = self.feature_centers();
        let mut color = self.base;
        let blob = |cx: f64, cy: f64, rx: f64, ry: f64| -> f64 {
            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            (-0.5 * (dx * dx + dy * dy)).exp()
        };
        let weights = [
            blob(centers[0][0], centers[0][1], self.eye_r, self.eye_r),
            blob(centers[1][0], centers[1][1], self.eye_r, self.eye_r),
            blob(centers[2][0], centers[2][1], self.nose_r, self.nose_r * 1.4),
            blob(centers[3][0], centers[3][1], self.mouth_rx, self.mouth_ry),
        ];
        let feature_colors = [&self.eye_color, &self.eye_color, &self.nose_color, &self.mouth_color];
        for (w, fc) in weights.iter().zip(feature_colors) {
            let w = w * 0.95;
            for ch in 0..3 {
                color[ch] = color[ch] * (1.0 - w) + fc[ch] * w;
            }
        }
        color
    }
}

struct OuterGeom {
    head_a: f64,
    head_b: f64,
    bg: [f64; 3],
    hair: [f64; 3],
    band_frac: f64,
    ring: [f64; 3],
}

impl OuterGeom {
    fn from_latent(z_attr: &[f32], size: f64) -> Self {
        let q = |i: u64| latent_param(PROJ_ATTR, i, z_attr);
        Self {
            head_a: size * (0.43 + 0.03 * q(0)),
            head_b: size * (0.45 - 0.025 * q(0)),
            bg: [0.5 + 0.4 * q(1), 0.5 + 0.4 * q(2), 0.5 + 0.4 * q(3)],
            hair: [0.45 + 0.4 * q(4), 0.45 + 0.4 * q(5), 0.45 + 0.4 * q(6)],
            band_frac: 0.18 + 0.10 * q(7),
            ring: [0.55 + 0.30 * q(8), 0.55 + 0.30 * q(9), 0.55 + 0.30 * q(10)],
        }
    }
}

/// Soft coverage of an axis-aligned ellipse with a ~1 pixel edge.
/// Returns 1 well inside, 0 well outside.
fn ellipse_coverage(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let dx = (x - cx) / a;
    let dy = (y - cy) / b;
    let rho = (dx * dx + dy * dy).sqrt();
    ((1.0 - rho) * a.min(b) + 0.5).clamp(0.0, 1.0)
}

// Fixed outline tone mixed along the inner-face edge; keeping the soft ring
// attribute-independent is what makes the factor separation exact.
const EDGE_TONE: [f64; 3] = [0.05, 0.05, 0.05];

/// Renders one sample. Pure function of its arguments: the inner region is a
/// function of `profile.z_id` only and the outer region of `z_attr` only.
pub fn render_face(profile: &IdentityProfile, z_attr: &[f32], cfg: &SynthConfig) -> Result<FaceSample> {
    if profile.z_id.len() != cfg.d_id {
        return Err(Error::LatentLength { expected: cfg.d_id, got: profile.z_id.len() });
    }
    if z_attr.len() != cfg.d_attr {
        return Err(Error::LatentLength { expected: cfg.d_attr, got: z_attr.len() });
    }
    let size = cfg.image_size;
    let s = size as f64;
    let inner = InnerGeom::from_latent(&profile.z_id, s);
    let outer = OuterGeom::from_latent(z_attr, s);
    let center = (s - 1.0) / 2.0;

    let mut image = Image::zeros(size, size, 3);
    let mut mask = Mask::zeros(size, size);
    let y_cut = center - outer.head_b + outer.band_frac * 2.0 * outer.head_b;

    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64, py as f64);
            let m = ellipse_coverage(x, y, inner.cx, inner.cy, inner.a, inner.b);
            mask.set(py, px, m as f32);
            let rgb = if m > 0.0 {
                let ic = inner.color_at(x, y);
                [
                    EDGE_TONE[0] * (1.0 - m) + ic[0] * m,
                    EDGE_TONE[1] * (1.0 - m) + ic[1] * m,
                    EDGE_TONE[2] * (1.0 - m) + ic[2] * m,
                ]
            } else {
                let h = ellipse_coverage(x, y, center, center, outer.head_a, outer.head_b);
                let head_col = if y < y_cut { outer.hair } else { outer.ring };
                [
                    outer.bg[0] * (1.0 - h) + head_col[0] * h,
                    outer.bg[1] * (1.0 - h) + head_col[1] * h,
                    outer.bg[2] * (1.0 - h) + head_col[2] * h,
                ]
            };
            for (ch, &v) in rgb.iter().enumerate() {
                image.set(py, px, ch, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    // 12 points around the head boundary, then the 4 feature centers.
    let mut landmarks = Vec::with_capacity(cfg.landmark_count);
    for k in 0..BOUNDARY_LANDMARKS {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / BOUNDARY_LANDMARKS as f64;
        landmarks.push([
            (center + outer.head_a * theta.cos()) as f32,
            (center + outer.head_b * theta.sin()) as f32,
        ]);
    }
    for fc in inner.feature_centers() {
        landmarks.push([fc[0] as f32, fc[1] as f32]);
    }

    Ok(FaceSample {
        image,
        landmarks,
        inner_mask: mask,
        id_label: profile.id_label,
        z_attr: z_attr.to_vec(),
    })
}

fn attr_for_image(profile: &IdentityProfile, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f32> {
    let noise = draw_normals(rng, cfg.d_attr);
    let rho = cfg.rho;
    let mix = (1.0 - rho * rho).sqrt();
    profile
        .attr_anchor
        .iter()
        .zip(&noise)
        .map(|(&a, &e)| (rho * a as f64 + mix * e as f64) as f32)
        .collect()
}

/// Generates the full dataset. Bit-exact for a given `master_seed` and
/// independent of scheduling: each profile and sample derives its own stream
/// from (seed, identity, image).
pub fn gen_dataset(cfg: &SynthConfig) -> Result<IdentityDataset> {
    cfg.validate()?;
    let profiles: Vec<IdentityProfile> = (0..cfg.num_identities)
        .map(|i| {
            let mut rng = rng_at(cfg.master_seed, &[DOMAIN_PROFILE, i as u64]);
            sample_identity(&mut rng, i as u32, cfg)
        })
        .collect();

    let total = cfg.num_identities * cfg.images_per_identity;
    let samples: Vec<FaceSample> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let i = flat / cfg.images_per_identity;
            let j = flat % cfg.images_per_identity;
            let mut rng = rng_at(cfg.master_seed, &[DOMAIN_SAMPLE, i as u64, j as u64]);
            let z_attr = attr_for_image(&profiles[i], &mut rng, cfg);
            render_face(&profiles[i], &z_attr, cfg)
        })
        .collect::<Result<_>>()?;

    let mut by_identity = vec![Vec::with_capacity(cfg.images_per_identity); cfg.num_identities];
    for (idx, sample) in samples.iter().enumerate() {
        by_identity[sample.id_label as usize].push(idx);
    }
    let dataset = IdentityDataset { samples, by_identity, config: cfg.clone() };
    dataset.validate()?;
    Ok(dataset)
}
