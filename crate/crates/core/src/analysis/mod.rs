//! Measurement instruments: similarity distributions, the replace-probability
//! sweep, verification accuracy, swap metric tables, and occlusion saliency.

pub mod metrics;
pub mod saliency;
pub mod verify;

use crate::blend::{pseudo_positive, BlendConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::margin::MarginConfig;
use crate::net::{self, EncoderParams};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::seeding::rng_at;
use crate::synth::IdentityDataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const DOMAIN_ANCHOR: u64 = 0x20;
const DOMAIN_BLEND: u64 = 0x21;

pub const HIST_BINS: usize = 100; // width 0.02 over [-1, 1]

/// Anything that maps an image to a unit-norm embedding.
pub trait Embedder: Sync {
    fn embed(&self, image: &Image<f32>) -> Vec<f32>;
}

impl Embedder for EncoderParams<f32> {
    fn embed(&self, image: &Image<f32>) -> Vec<f32> {
        let arch = self.arch;
        let mut x = vec![0.0f32; arch.channels * arch.image_size * arch.image_size];
        for y in 0..image.height {
            for px in 0..image.width {
                for c in 0..image.channels {
                    x[c * image.height * image.width + y * image.width + px] = image.get(y, px, c);
                }
            }
        }
        let mut emb = vec![0.0f32; arch.d_emb];
        net::forward_single(self, &x, &mut emb);
        emb
    }
}

/// Cosine similarity, clamped into [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Embeds a list of images in parallel, order-preserving.
pub fn embed_all(embedder: &dyn Embedder, images: &[&Image<f32>]) -> Vec<Vec<f32>> {
    images.par_iter().map(|img| embedder.embed(img)).collect()
}

/// The Same / Swapped / Closest similarity populations plus summary stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub sims_same: Vec<f32>,
    pub sims_swapped: Vec<f32>,
    pub sims_closest: Vec<f32>,
    pub hist_same: Vec<u32>,
    pub hist_swapped: Vec<u32>,
    pub hist_closest: Vec<u32>,
    pub mean_same: f64,
    pub std_same: f64,
    pub mean_swapped: f64,
    pub std_swapped: f64,
    pub mean_closest: f64,
    pub std_closest: f64,
    /// mean(same) - mean(swapped); the attribute-bias signature.
    pub gap: f64,
    /// Overlap coefficient of the normalized Same and Swapped histograms.
    pub overlap: f64,
}

pub fn histogram(sims: &[f32]) -> Vec<u32> {
    let mut hist = vec![0u32; HIST_BINS];
    for &s in sims {
        let bin = (((s + 1.0) / 0.02).floor() as usize).min(HIST_BINS - 1);
        hist[bin] += 1;
    }
    hist
}

fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn overlap_coefficient(a: &[u32], b: &[u32]) -> f64 {
    let na: f64 = a.iter().map(|&v| v as f64).sum();
    let nb: f64 = b.iter().map(|&v| v as f64).sum();
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb)).sum()
}

fn build_report(same: Vec<f32>, swapped: Vec<f32>, closest: Vec<f32>) -> DistributionReport {
    let hist_same = histogram(&same);
    let hist_swapped = histogram(&swapped);
    let hist_closest = histogram(&closest);
    let (mean_same, std_same) = mean_std(&same);
    let (mean_swapped, std_swapped) = mean_std(&swapped);
    let (mean_closest, std_closest) = mean_std(&closest);
    DistributionReport {
        gap: mean_same - mean_swapped,
        overlap: overlap_coefficient(&hist_same, &hist_swapped),
        sims_same: same,
        sims_swapped: swapped,
        sims_closest: closest,
        hist_same,
        hist_swapped,
        hist_closest,
        mean_same,
        std_same,
        mean_swapped,
        std_swapped,
        mean_closest,
        std_closest,
    }
}

/// The similarity-distribution experiment: for sampled anchors, cosine
/// similarities against every same-identity image (the anchor itself
/// included, pinning the similarity-1 spike), against each image's blended
/// pseudo-positive, and against the nearest-landmark candidates used to
/// build those blends.
pub fn similarity_distributions(
    embedder: &dyn Embedder,
    dataset: &IdentityDataset,
    anchors_per_identity: usize,
    bcfg: &BlendConfig,
    seed: u64,
) -> Result<DistributionReport> {
    dataset.validate()?;
    if anchors_per_identity == 0 {
        return Err(Error::InvalidConfig("anchors_per_identity must be >= 1".into()));
    }
    for (label, idxs) in dataset.by_identity.iter().enumerate() {
        if anchors_per_identity > idxs.len() {
            return Err(Error::TooFewImages(label as u32));
        }
    }

    let images: Vec<&Image<f32>> = dataset.samples.iter().map(|s| &s.image).collect();
    let clean_emb = embed_all(embedder, &images);

    // One blended counterpart (and its candidate) per dataset sample.
    let blends: Vec<(Vec<f32>, usize)> = (0..dataset.samples.len())
        .into_par_iter()
        .map(|idx| {
            let mut rng = rng_at(seed, &[DOMAIN_BLEND, idx as u64]);
            let blended = pseudo_positive(&dataset.samples[idx], dataset, &mut rng, bcfg)?;
            Ok((embedder.embed(&blended.image), blended.candidate_index))
        })
        .collect::<Result<_>>()?;

    let mut same = Vec::new();
    let mut swapped = Vec::new();
    let mut closest = Vec::new();
    for (identity, idxs) in dataset.by_identity.iter().enumerate() {
        let mut rng = rng_at(seed, &[DOMAIN_ANCHOR, identity as u64]);
        let picks = rand::seq::index::sample(&mut rng, idxs.len(), anchors_per_identity);
        for a in picks.iter() {
            let anchor_idx = idxs[a];
            let e_anchor = &clean_emb[anchor_idx];
            for &k in idxs {
                if k == anchor_idx {
                    same.push(1.0); // cos(u, u) = 1 exactly
                } else {
                    same.push(cosine(e_anchor, &clean_emb[k]));
                }
                let (e_blend, cand_idx) = &blends[k];
                swapped.push(cosine(e_anchor, e_blend));
                closest.push(cosine(e_anchor, &clean_emb[*cand_idx]));
            }
        }
    }
    Ok(build_report(same, swapped, closest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_replace: f64,
    pub gap: f64,
    pub overlap: f64,
    pub mean_same: f64,
    pub mean_swapped: f64,
    pub final_clean_accuracy: f64,
}

/// Trains one encoder per replace probability (shared seed) and summarizes
/// each encoder's similarity distributions.
#[allow(clippy::too_many_arguments)]
pub fn gap_sweep(
    dataset: &IdentityDataset,
    p_values: &[f64],
    pcfg: &PretrainConfig,
    mcfg: &MarginConfig,
    bcfg: &BlendConfig,
    anchors_per_identity: usize,
    analysis_seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(p_values.len());
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("p value {p} outside [0, 1]")));
        }
        let run_cfg = PretrainConfig { p_replace: p, ..pcfg.clone() };
        let ckpt = pretrain(dataset, &run_cfg, mcfg, bcfg)?;
        let report = similarity_distributions(
            &ckpt.params,
            dataset,
            anchors_per_identity,
            bcfg,
            analysis_seed,
        )?;
        points.push(SweepPoint {
            p_replace: p,
            gap: report.gap,
            overlap: report.overlap,
            mean_same: report.mean_same,
            mean_swapped: report.mean_swapped,
            final_clean_accuracy: ckpt.final_clean_accuracy,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, SynthConfig};

    pub(crate) struct ConstantEmbedder;
    impl Embedder for ConstantEmbedder {
        fn embed(&self, _image: &Image<f32>) -> Vec<f32> {
            vec![0.5; 4]
        }
    }

    fn small_dataset() -> IdentityDataset {
        gen_dataset(&SynthConfig {
            num_identities: 5,
            images_per_identity: 4,
            master_seed: 17,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn bcfg() -> BlendConfig {
        BlendConfig { candidate_pool_size: 4, ..BlendConfig::default() }
    }

    #[test]
    fn constant_embedder_gives_all_ones() {
        let ds = small_dataset();
        let report =
            similarity_distributions(&ConstantEmbedder, &ds, 1, &bcfg(), 3).unwrap();
        assert!(report.sims_same.iter().all(|&s| s == 1.0));
        assert!(report.sims_swapped.iter().all(|&s| s == 1.0));
        assert!(report.sims_closest.iter().all(|&s| s == 1.0));
        assert_eq!(report.gap, 0.0);
        assert!((report.overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_sizes_match_construction() {
        let ds = small_dataset();
        for anchors in [1usize, 2] {
            let report =
                similarity_distributions(&ConstantEmbedder, &ds, anchors, &bcfg(), 3).unwrap();
            let expect: usize = ds.by_identity.iter().map(|idxs| anchors * idxs.len()).sum();
            assert_eq!(report.sims_same.len(), expect);
            assert_eq!(report.sims_swapped.len(), expect);
            assert_eq!(report.sims_closest.len(), expect);
            let mass: u32 = report.hist_same.iter().sum();
            assert_eq!(mass as usize, expect);
        }
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let ds = small_dataset();
        let params =
            EncoderParams::<f32>::init(crate::net::EncoderArch::new(32, 3, 5), 3).unwrap();
        let report = similarity_distributions(&params, &ds, 1, &bcfg(), 9).unwrap();
        // One exact 1.0 per anchor from the self comparison.
        let exact_ones = report.sims_same.iter().filter(|&&s| s == 1.0).count();
        assert!(exact_ones >= ds.num_identities());
        assert!(report.sims_same.iter().all(|&s| (-1.0..=1.0).contains(&s)));
        assert!(report.sims_swapped.iter().all(|&s| (-1.0..=1.0).contains(&s)));
    }

    #[test]
    fn distributions_deterministic() {
        let ds = small_dataset();
        let params =
            EncoderParams::<f32>::init(crate::net::EncoderArch::new(32, 3, 5), 3).unwrap();
        let a = similarity_distributions(&params, &ds, 1, &bcfg(), 5).unwrap();
        let b = similarity_distributions(&params, &ds, 1, &bcfg(), 5).unwrap();
        assert_eq!(a.sims_same, b.sims_same);
        assert_eq!(a.sims_swapped, b.sims_swapped);
        assert_eq!(a.gap, b.gap);
    }

    #[test]
    fn histogram_bins_and_overlap() {
        let hist = histogram(&[-1.0, -0.99, 0.0, 0.999, 1.0]);
        assert_eq!(hist[0], 2);
        assert_eq!(hist[50], 1);
        assert_eq!(hist[99], 2);
        let full = overlap_coefficient(&hist, &hist);
        assert!((full - 1.0).abs() < 1e-12);
        let disjoint_a = histogram(&[-0.9; 4]);
        let disjoint_b = histogram(&[0.9; 4]);
        assert_eq!(overlap_coefficient(&disjoint_a, &disjoint_b), 0.0);
    }

    #[test]
    fn too_many_anchors_rejected() {
        let ds = small_dataset();
        assert!(similarity_distributions(&ConstantEmbedder, &ds, 9, &bcfg(), 0).is_err());
    }
}
