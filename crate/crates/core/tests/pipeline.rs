//! Cross-module pipeline invariants at realistic scale.

use rayon::prelude::*;
use swaplab_core::blend::{pseudo_positive, BlendConfig};
use swaplab_core::seeding::rng_at;
use swaplab_core::synth::{gen_dataset, FaceSample, SynthConfig, BOUNDARY_LANDMARKS};

fn mid_dataset() -> swaplab_core::synth::IdentityDataset {
    gen_dataset(&SynthConfig {
        num_identities: 25,
        images_per_identity: 8,
        master_seed: 1234,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Index of the window pixel that sticks out most from the local average,
/// in the direction the anchor's feature center points.
fn window_argext(image: &swaplab_core::image::Image<f32>, cy: usize, cx: usize, dark: bool) -> (usize, usize) {
    let mut best = (cy, cx);
    let mut best_val = if dark { f32::INFINITY } else { f32::NEG_INFINITY };
    for y in cy.saturating_sub(1)..=(cy + 1).min(image.height - 1) {
        for x in cx.saturating_sub(1)..=(cx + 1).min(image.width - 1) {
            let lum = image.get(y, x, 0) + image.get(y, x, 1) + image.get(y, x, 2);
            if (dark && lum < best_val) || (!dark && lum > best_val) {
                best_val = lum;
                best = (y, x);
            }
        }
    }
    best
}

fn feature_windows(sample: &FaceSample) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for (k, lm) in sample.landmarks.iter().enumerate().skip(BOUNDARY_LANDMARKS) {
        let cx = lm[0].round() as usize;
        let cy = lm[1].round() as usize;
        // Compare the feature's tone against the surrounding window to decide
        // whether its extremum is a dark or a bright spot.
        let center =
            sample.image.get(cy, cx, 0) + sample.image.get(cy, cx, 1) + sample.image.get(cy, cx, 2);
        let mut around = 0.0f32;
        let mut n = 0.0f32;
        for y in cy.saturating_sub(2)..=(cy + 2).min(sample.image.height - 1) {
            for x in cx.saturating_sub(2)..=(cx + 2).min(sample.image.width - 1) {
                around += sample.image.get(y, x, 0)
                    + sample.image.get(y, x, 1)
                    + sample.image.get(y, x, 2);
                n += 1.0;
            }
        }
        let dark = center < around / n;
        let _ = k;
        out.push((cy, cx, dark));
    }
    out
}

#[test]
fn inner_feature_extrema_survive_500_blends() {
    let ds = mid_dataset();
    let cfg = BlendConfig { candidate_pool_size: 30, ..BlendConfig::default() };
    let failures: usize = (0..500usize)
        .into_par_iter()
        .map(|trial| {
            let anchor = &ds.samples[trial % ds.samples.len()];
            let mut rng = rng_at(777, &[trial as u64]);
            let blended = pseudo_positive(anchor, &ds, &mut rng, &cfg).unwrap();
            let mut bad = 0usize;
            for (cy, cx, dark) in feature_windows(anchor) {
                let want = window_argext(&anchor.image, cy, cx, dark);
                let got = window_argext(&blended.image, cy, cx, dark);
                if want != got {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    assert_eq!(failures, 0, "{failures} feature extrema moved under blending");
}

#[test]
fn blend_batches_are_order_independent() {
    let ds = mid_dataset();
    let cfg = BlendConfig { candidate_pool_size: 20, ..BlendConfig::default() };
    let ids: Vec<usize> = (0..40).collect();
    let forward: Vec<_> = ids
        .iter()
        .map(|&i| pseudo_positive(&ds.samples[i], &ds, &mut rng_at(5, &[i as u64]), &cfg).unwrap())
        .collect();
    let mut reversed: Vec<_> = ids
        .iter()
        .rev()
        .map(|&i| pseudo_positive(&ds.samples[i], &ds, &mut rng_at(5, &[i as u64]), &cfg).unwrap())
        .collect();
    reversed.reverse();
    assert_eq!(forward, reversed);

    let parallel: Vec<_> = ids
        .par_iter()
        .map(|&i| pseudo_positive(&ds.samples[i], &ds, &mut rng_at(5, &[i as u64]), &cfg).unwrap())
        .collect();
    assert_eq!(forward, parallel);
}

#[test]
fn full_scale_masks_and_ranges_sane() {
    let ds = gen_dataset(&SynthConfig { master_seed: 99, ..SynthConfig::default() }).unwrap();
    assert_eq!(ds.samples.len(), 8000);
    for s in &ds.samples {
        let m = s.inner_mask.mean();
        assert!((0.05..=0.6).contains(&m), "mask mean {m}");
    }
    // Spot-check pixel ranges on a subsample.
    for s in ds.samples.iter().step_by(97) {
        assert!(s.image.in_unit_range());
    }
}
