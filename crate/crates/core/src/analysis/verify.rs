//! Face verification with 10-fold cross-validated threshold selection.

use super::{cosine, embed_all, Embedder};
use crate::error::{Error, Result};
use crate::seeding::rng_at;
use crate::synth::IdentityDataset;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Builds a balanced pair list (half same-identity, half different) over a
/// dataset, deterministically from the seed.
pub fn make_verification_pairs(
    dataset: &IdentityDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    dataset.validate()?;
    let k = dataset.num_identities();
    let mut rng = rng_at(seed, &[0x30]);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        if i % 2 == 0 {
            let identity = rng.gen_range(0..k);
            let idxs = &dataset.by_identity[identity];
            let picks = rand::seq::index::sample(&mut rng, idxs.len(), 2);
            pairs.push(VerificationPair {
                a: idxs[picks.index(0)],
                b: idxs[picks.index(1)],
                same: true,
            });
        } else {
            let ia = rng.gen_range(0..k);
            let mut ib = rng.gen_range(0..k - 1);
            if ib >= ia {
                ib += 1;
            }
            let a = dataset.by_identity[ia][rng.gen_range(0..dataset.by_identity[ia].len())];
            let b = dataset.by_identity[ib][rng.gen_range(0..dataset.by_identity[ib].len())];
            pairs.push(VerificationPair { a, b, same: false });
        }
    }
    Ok(pairs)
}

fn accuracy_at(sims: &[(f32, bool)], threshold: f32) -> f64 {
    let correct = sims.iter().filter(|&&(s, same)| (s >= threshold) == same).count();
    correct as f64 / sims.len() as f64
}

/// Exhaustive threshold search over the observed similarity values (plus a
/// reject-all sentinel); ties resolve to the lowest threshold.
fn best_threshold(sims: &[(f32, bool)]) -> f32 {
    let mut candidates: Vec<f32> = sims.iter().map(|&(s, _)| s).collect();
    candidates.push(f32::INFINITY);
    candidates.sort_by(f32::total_cmp);
    let mut best = candidates[0];
    let mut best_acc = -1.0;
    for &t in &candidates {
        let acc = accuracy_at(sims, t);
        if acc > best_acc {
            best_acc = acc;
            best = t;
        }
    }
    best
}

/// 10-fold cross-validated verification accuracy over labeled similarity
/// scores. Folds are assigned after a canonical sort so the result does not
/// depend on the input order.
pub fn verification_accuracy_from_sims(sims: &[(f32, bool)]) -> Result<f64> {
    if sims.len() < FOLDS {
        return Err(Error::EmptyFold);
    }
    let mut canon = sims.to_vec();
    canon.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    let mut total = 0.0;
    for fold in 0..FOLDS {
        let test: Vec<(f32, bool)> = canon
            .iter()
            .enumerate()
            .filter(|(i, _)| i % FOLDS == fold)
            .map(|(_, &p)| p)
            .collect();
        let train: Vec<(f32, bool)> = canon
            .iter()
            .enumerate()
            .filter(|(i, _)| i % FOLDS != fold)
            .map(|(_, &p)| p)
            .collect();
        if test.is_empty() || train.is_empty() {
            return Err(Error::EmptyFold);
        }
        let threshold = best_threshold(&train);
        total += accuracy_at(&test, threshold);
    }
    Ok(total / FOLDS as f64)
}

/// Embeds both sides of every pair and runs the cross-validated protocol.
pub fn verification_accuracy(
    embedder: &dyn Embedder,
    dataset: &IdentityDataset,
    pairs: &[VerificationPair],
) -> Result<f64> {
    let images: Vec<&crate::image::Image<f32>> =
        dataset.samples.iter().map(|s| &s.image).collect();
    let embeddings = embed_all(embedder, &images);
    let sims: Vec<(f32, bool)> = pairs
        .iter()
        .map(|p| (cosine(&embeddings[p.a], &embeddings[p.b]), p.same))
        .collect();
    verification_accuracy_from_sims(&sims)
}
