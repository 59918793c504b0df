//! Occlusion-sensitivity saliency maps.
//!
//! Slide a square occluder over the image at several sizes, measure how much
//! the identity similarity to a reference drops, spread each drop over the
//! occluded pixels, normalize by per-pixel coverage, and average over sizes.

use super::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub sizes_used: Vec<usize>,
    pub stride: usize,
    pub fill_value: f32,
}

/// Default occluder sizes: the ladder {4, 6, 8, 10, 12, 14} at a 32-pixel
/// side, scaled proportionally (rounded to even) for other resolutions.
pub fn default_sizes(image_size: usize) -> Vec<usize> {
    [4usize, 6, 8, 10, 12, 14]
        .iter()
        .map(|&s| {
            let scaled = (s * image_size) as f64 / 32.0;
            let even = 2.0 * (scaled / 2.0).round();
            (even as usize).clamp(2, image_size)
        })
        .collect()
}

pub const DEFAULT_STRIDE: usize = 2;
pub const DEFAULT_FILL: f32 = 0.5;

fn grid_starts(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=extent.saturating_sub(size)).step_by(stride).collect();
    let last = extent - size;
    if *starts.last().unwrap() != last {
        starts.push(last); // keep the far edge covered
    }
    starts
}

/// Averaged sensitivity of identity similarity under sliding occlusions.
pub fn occlusion_saliency(
    embedder: &dyn Embedder,
    image: &Image<f32>,
    reference: &Image<f32>,
    sizes: &[usize],
    stride: usize,
    fill: f32,
) -> Result<SaliencyMap> {
    let (h, w) = (image.height, image.width);
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no occluder sizes".into()));
    }
    for &s in sizes {
        if s == 0 || s > h || s > w {
            return Err(Error::InvalidConfig(format!("occluder size {s} outside image")));
        }
        if stride == 0 || stride > s {
            return Err(Error::InvalidConfig(
                "stride must be in [1, size] so every pixel is covered".into(),
            ));
        }
    }

    let e_ref = embedder.embed(reference);
    let sim_orig = cosine(&e_ref, &embedder.embed(image));

    let mut final_map = vec![0.0f64; h * w];
    for &size in sizes {
        let positions: Vec<(usize, usize)> = grid_starts(h, size, stride)
            .into_iter()
            .flat_map(|y| grid_starts(w, size, stride).into_iter().map(move |x| (y, x)))
            .collect();
        let drops: Vec<f32> = positions
            .par_iter()
            .map(|&(y0, x0)| {
                let mut occluded = image.clone();
                for y in y0..y0 + size {
                    for x in x0..x0 + size {
                        for c in 0..image.channels {
                            occluded.set(y, x, c, fill);
                        }
                    }
                }
                let sim = cosine(&e_ref, &embedder.embed(&occluded));
                (sim_orig - sim).max(0.0)
            })
            .collect();

        let mut acc = vec![0.0f64; h * w];
        let mut coverage = vec![0u32; h * w];
        for (&(y0, x0), &drop) in positions.iter().zip(&drops) {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    acc[y * w + x] += drop as f64;
                    coverage[y * w + x] += 1;
                }
            }
        }
        assert!(coverage.iter().all(|&c| c > 0), "occluder grid left a pixel uncovered");
        for i in 0..h * w {
            final_map[i] += acc[i] / coverage[i] as f64;
        }
    }

    let scale = 1.0 / sizes.len() as f64;
    Ok(SaliencyMap {
        values: final_map.iter().map(|&v| (v * scale) as f32).collect(),
        height: h,
        width: w,
        sizes_used: sizes.to_vec(),
        stride,
        fill_value: fill,
    })
}

/// Share of saliency mass inside the inner-face mask; 0 when the map is empty.
pub fn saliency_inner_fraction(map: &SaliencyMap, inner_mask: &Mask<f32>) -> Result<f64> {
    if map.height != inner_mask.height || map.width != inner_mask.width {
        return Err(Error::ShapeMismatch("saliency map and mask differ in shape".into()));
    }
    let total: f64 = map.values.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 =
        map.values.iter().zip(&inner_mask.data).map(|(&v, &m)| v as f64 * m as f64).sum();
    Ok(inside / total)
}

/// Self-referenced saliency maps over a seeded sample of dataset images;
/// returns per-image inner fractions and their mean.
pub fn inner_fraction_over_dataset(
    embedder: &dyn Embedder,
    dataset: &crate::synth::IdentityDataset,
    images: usize,
    sizes: &[usize],
    stride: usize,
    fill: f32,
    seed: u64,
) -> Result<(Vec<(usize, f64)>, f64)> {
    if images == 0 || images > dataset.samples.len() {
        return Err(Error::InvalidConfig(format!(
            "saliency image count {images} outside dataset size"
        )));
    }
    let mut rng = crate::seeding::rng_at(seed, &[0x44]);
    let picks = rand::seq::index::sample(&mut rng, dataset.samples.len(), images);
    let mut per_image = Vec::with_capacity(images);
    let mut total = 0.0;
    for idx in picks.iter() {
        let s = &dataset.samples[idx];
        let map = occlusion_saliency(embedder, &s.image, &s.image, sizes, stride, fill)?;
        let frac = saliency_inner_fraction(&map, &s.inner_mask)?;
        per_image.push((idx, frac));
        total += frac;
    }
    Ok((per_image, total / images as f64))
}
