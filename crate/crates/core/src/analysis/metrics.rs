//! Absolute and relative swap metrics over an evaluation pair set.
//!
//! Identity distances compare the swapped image with the source through each
//! encoder; attribute distances live in the ground-truth attribute-latent
//! space. The swapper output is composited onto the raw target before
//! measuring, so the outer region is the target's verbatim and the target's
//! attribute vector is the swapped image's ground truth — a fact the code
//! asserts per pair rather than assumes.

use super::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::losses::{composite_output, SwapPair, Swapper};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderMetrics {
    pub name: String,
    /// Mean cosine distance between the swap and its source.
    pub identity_distance: f64,
    /// Mean of d(Y, src) / (d(Y, src) + d(Y, tgt)).
    pub identity_distance_relative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricTable {
    pub per_encoder: Vec<EncoderMetrics>,
    /// Mean L2 between the swap's ground-truth attribute latent and the
    /// target's (zero for the oracle-composited swapper, by construction).
    pub attribute_distance: f64,
    /// Mean of d_attr(Y, tgt) / (d_attr(Y, tgt) + d_attr(Y, src)).
    pub attribute_distance_relative: f64,
    pub pairs: usize,
}

/// Normalized two-endpoint distance in [0, 1]; 0.5 when equidistant
/// (including the degenerate both-zero case).
pub fn relative_distance(d_primary: f64, d_other: f64) -> f64 {
    let total = d_primary + d_other;
    if total == 0.0 {
        0.5
    } else {
        d_primary / total
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Runs the swapper over the pairs and measures every encoder.
pub fn swap_metrics(
    encoders: &[(&str, &dyn Embedder)],
    swapper: &dyn Swapper<f32>,
    pairs: &[SwapPair],
) -> Result<MetricTable> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no evaluation pairs".into()));
    }
    let mut swaps = Vec::with_capacity(pairs.len());
    let mut attr_abs = 0.0f64;
    let mut attr_rel = 0.0f64;
    for pair in pairs {
        if pair.same_identity {
            return Err(Error::InvalidConfig(
                "swap metrics expect differing-identity pairs".into(),
            ));
        }
        let (raw, mask) = swapper.swap(
            &pair.source.image,
            &pair.source.inner_mask,
            &pair.target.image,
            &pair.target.inner_mask,
        )?;
        let y = composite_output(&raw, &pair.target.image, &mask)?;
        // Outside the blend mask the composite must be the target verbatim;
        // this is what grounds attributing the target's z_attr to Y.
        for p in 0..mask.data.len() {
            if mask.data[p] == 0.0 {
                for c in 0..y.channels {
                    assert_eq!(
                        y.data[p * y.channels + c],
                        pair.target.image.data[p * y.channels + c],
                        "composited swap does not preserve the target outside the mask"
                    );
                }
            }
        }
        let y_attr = pair.target.z_attr.clone();
        attr_abs += l2(&y_attr, &pair.target.z_attr);
        attr_rel += relative_distance(
            l2(&y_attr, &pair.target.z_attr),
            l2(&y_attr, &pair.source.z_attr),
        );
        swaps.push(y);
    }

    let mut per_encoder = Vec::with_capacity(encoders.len());
    for (name, embedder) in encoders {
        let mut d_abs = 0.0f64;
        let mut d_rel = 0.0f64;
        for (pair, y) in pairs.iter().zip(&swaps) {
            let e_y = embedder.embed(y);
            let e_src = embedder.embed(&pair.source.image);
            let e_tgt = embedder.embed(&pair.target.image);
            let d_src = 1.0 - cosine(&e_y, &e_src) as f64;
            let d_tgt = 1.0 - cosine(&e_y, &e_tgt) as f64;
            d_abs += d_src;
            d_rel += relative_distance(d_src, d_tgt);
        }
        per_encoder.push(EncoderMetrics {
            name: name.to_string(),
            identity_distance: d_abs / pairs.len() as f64,
            identity_distance_relative: d_rel / pairs.len() as f64,
        });
    }

    Ok(MetricTable {
        per_encoder,
        attribute_distance: attr_abs / pairs.len() as f64,
        attribute_distance_relative: attr_rel / pairs.len() as f64,
        pairs: pairs.len(),
    })
}

/// Mean identity distance between anchors and their blended pseudo-positives
/// under one embedder; the paper-level contrast compares this across
/// encoders trained with different replace probabilities.
pub fn pseudo_pair_identity_distance(
    embedder: &dyn Embedder,
    dataset: &crate::synth::IdentityDataset,
    count: usize,
    bcfg: &crate::blend::BlendConfig,
    seed: u64,
) -> Result<f64> {
    use rayon::prelude::*;
    if count == 0 {
        return Err(Error::InvalidConfig("pseudo-pair count must be positive".into()));
    }
    let total: f64 = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::seeding::rng_at(seed, &[0x33, i as u64]);
            let anchor = &dataset.samples[i % dataset.samples.len()];
            let blended = crate::blend::pseudo_positive(anchor, dataset, &mut rng, bcfg)?;
            let e_anchor = embedder.embed(&anchor.image);
            let e_blend = embedder.embed(&blended.image);
            Ok(1.0 - cosine(&e_anchor, &e_blend) as f64)
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::BlendConfig;
    use crate::image::{Image, Mask};
    use crate::losses::{sample_pair, OracleBlender};
    use crate::seeding::rng_at;
    use crate::synth::{gen_dataset, SynthConfig};

    #[test]
    fn pseudo_pair_distance_zero_for_constant_embedder()
    {
        let ds = dataset();
        let cfg = BlendConfig { candidate_pool_size: 4, ..BlendConfig::default() };
        let d = pseudo_pair_identity_distance(&ConstantEmbedder, &ds, 10, &cfg, 3).unwrap();
        assert!(d.abs() < 1e-6);
    }

    #[test]
    fn relative_distance_endpoints() {
        assert_eq!(relative_distance(0.0, 0.7), 0.0); // Y = source
        assert_eq!(relative_distance(0.7, 0.0), 1.0); // Y = target
        assert_eq!(relative_distance(0.3, 0.3), 0.5); // equidistant
        assert_eq!(relative_distance(0.0, 0.0), 0.5); // degenerate
    }

    /// Embeds every image to the same vector: all distances 0 -> relative 0.5.
    struct ConstantEmbedder;
    impl Embedder for ConstantEmbedder {
        fn embed(&self, _image: &Image<f32>) -> Vec<f32> {
            vec![1.0, 0.0, 0.0]
        }
    }

    /// Pass-through of the source (ideal identity swap for testing).
    struct SourceEcho;
    impl Swapper<f32> for SourceEcho {
        fn swap(
            &self,
            s: &Image<f32>,
            sm: &Mask<f32>,
            _t: &Image<f32>,
            _tm: &Mask<f32>,
        ) -> Result<(Image<f32>, Mask<f32>)> {
            Ok((s.clone(), sm.clone()))
        }
        fn swap_vjp_target(
            &self,
            _s: &Image<f32>,
            _sm: &Mask<f32>,
            _t: &Image<f32>,
            _tm: &Mask<f32>,
            d: &Image<f32>,
        ) -> Result<Image<f32>> {
            Ok(d.clone())
        }
    }

    fn dataset() -> crate::synth::IdentityDataset {
        gen_dataset(&SynthConfig {
            num_identities: 6,
            images_per_identity: 4,
            master_seed: 41,
            ..Default::default()
        })
        .unwrap()
    }

    fn different_pairs(n: usize) -> Vec<SwapPair> {
        let ds = dataset();
        let mut rng = rng_at(5, &[1]);
        (0..n).map(|_| sample_pair(&ds, &mut rng, 0.0).unwrap()).collect()
    }

    #[test]
    fn equidistant_embedder_reports_half() {
        let pairs = different_pairs(4);
        let oracle = OracleBlender { cfg: BlendConfig { candidate_pool_size: 4, ..Default::default() } };
        let table = swap_metrics(&[("stub", &ConstantEmbedder)], &oracle, &pairs).unwrap();
        let m = &table.per_encoder[0];
        assert_eq!(m.identity_distance, 0.0);
        assert_eq!(m.identity_distance_relative, 0.5);
        // Oracle composite carries the target's attributes exactly.
        assert_eq!(table.attribute_distance, 0.0);
        assert!(table.attribute_distance_relative <= 0.5);
    }

    #[test]
    fn relative_distance_bounds_hold() {
        let pairs = different_pairs(6);
        let oracle = OracleBlender { cfg: BlendConfig { candidate_pool_size: 4, ..Default::default() } };
        let params =
            crate::net::EncoderParams::<f32>::init(crate::net::EncoderArch::new(32, 3, 6), 2)
                .unwrap();
        let table = swap_metrics(&[("enc", &params)], &oracle, &pairs).unwrap();
        let m = &table.per_encoder[0];
        assert!((0.0..=1.0).contains(&m.identity_distance_relative));
        assert!((0.0..=1.0).contains(&table.attribute_distance_relative));
    }

    #[test]
    fn source_echo_composite_measures_source_inside_mask() {
        // With a swapper that echoes the source, Y is source-inside-mask and
        // target-outside; a real encoder should place it between the two.
        let pairs = different_pairs(3);
        let params =
            crate::net::EncoderParams::<f32>::init(crate::net::EncoderArch::new(32, 3, 6), 8)
                .unwrap();
        let table = swap_metrics(&[("enc", &params)], &SourceEcho, &pairs).unwrap();
        assert!(table.per_encoder[0].identity_distance >= 0.0);
    }

    #[test]
    fn same_identity_pairs_rejected() {
        let ds = dataset();
        let mut rng = rng_at(5, &[2]);
        let pair = sample_pair(&ds, &mut rng, 1.0).unwrap();
        let oracle = OracleBlender::default();
        assert!(swap_metrics(&[("stub", &ConstantEmbedder)], &oracle, &[pair]).is_err());
    }
}
