//! Margin-loss pretraining with blended pseudo-positive replacement.
//!
//! Each training image is independently replaced by its blended
//! pseudo-positive with probability `p_replace`, keeping the original label.
//! Replacement decisions and candidate draws derive from (seed, epoch,
//! dataset index), so batches are reproducible regardless of evaluation
//! order or thread count.

use crate::blend::{pseudo_positive, BlendConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::margin::{self, MarginConfig};
use crate::net::{self, EncoderArch, EncoderParams, ParamGrads};
use crate::seeding::rng_at;
use crate::synth::IdentityDataset;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const DOMAIN_INIT: u64 = 0x10;
const DOMAIN_SHUFFLE: u64 = 0x11;
const DOMAIN_REPLACE: u64 = 0x12;

const REDUCE_CHUNK: usize = 16;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine decay from the base rate to zero over all steps.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Probability of swapping a training image for its pseudo-positive.
    pub p_replace: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            p_replace: 0.5,
            epochs: 20,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_replace) {
            return Err(Error::InvalidConfig("p_replace must lie in [0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean margin loss over the epoch's training inputs.
    pub loss: f64,
    /// Nearest-head accuracy on the training inputs as fed (replacements included).
    pub accuracy: f64,
    /// Fraction of samples replaced by pseudo-positives.
    pub replaced_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub params: EncoderParams<f32>,
    pub pretrain_cfg: PretrainConfig,
    pub margin_cfg: MarginConfig,
    pub blend_cfg: BlendConfig,
    pub training_log: Vec<EpochStats>,
    /// Nearest-head accuracy on the clean training set after the final epoch.
    pub final_clean_accuracy: f64,
}

/// Packs an HWC image into a CHW slice.
fn pack_chw(img: &Image<f32>, out: &mut [f32]) {
    let (h, w, ch) = (img.height, img.width, img.channels);
    for y in 0..h {
        for x in 0..w {
            for c0 in 0..ch {
                out[c0 * h * w + y * w + x] = img.get(y, x, c0);
            }
        }
    }
}

struct ChunkResult {
    grads: ParamGrads<f32>,
    d_norm_head: Vec<f32>,
    loss: f64,
    correct: usize,
}

/// Fused margin step: forward, per-sample margin loss, and backward in one
/// pass over the batch with deterministic chunked reduction.
fn margin_step(
    params: &EncoderParams<f32>,
    batch: &[f32],
    labels: &[u32],
    mcfg: &MarginConfig,
) -> (f64, usize, ParamGrads<f32>) {
    let arch = params.arch;
    let sample = arch.channels * arch.image_size * arch.image_size;
    let b = labels.len();
    let d = arch.d_emb;
    let inv_b = 1.0f32 / b as f32;
    let (norm_head, norms) = margin::normalize_head(&params.head, d);

    let chunks: Vec<ChunkResult> = batch
        .par_chunks(REDUCE_CHUNK * sample)
        .zip(labels.par_chunks(REDUCE_CHUNK))
        .map(|(xs, ls)| {
            let mut grads = ParamGrads::zeros(arch);
            let mut d_norm_head = vec![0.0f32; mcfg.classes * d];
            let mut loss = 0.0f64;
            let mut correct = 0usize;
            let mut emb = vec![0.0f32; d];
            let mut d_x = vec![0.0f32; sample];
            for (x, &label) in xs.chunks(sample).zip(ls) {
                let trace = net::forward_single(params, x, &mut emb);
                let out = margin::margin_sample(&emb, label as usize, &norm_head, mcfg);
                loss += out.loss as f64;
                if out.predicted == label as usize {
                    correct += 1;
                }
                let d_emb: Vec<f32> = out.d_emb.iter().map(|g| g * inv_b).collect();
                for (ki, &ck) in out.coef.iter().enumerate() {
                    let row = &mut d_norm_head[ki * d..(ki + 1) * d];
                    let scaled = ck * inv_b;
                    for (r, &e) in row.iter_mut().zip(&emb) {
                        *r += scaled * e;
                    }
                }
                net::backward_single(params, &trace, &d_emb, &mut grads, &mut d_x);
            }
            ChunkResult { grads, d_norm_head, loss, correct }
        })
        .collect();

    let mut grads = ParamGrads::zeros(arch);
    let mut d_norm_head = vec![0.0f32; mcfg.classes * d];
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for chunk in &chunks {
        grads.axpy(&chunk.grads, 1.0);
        for (a, &b0) in d_norm_head.iter_mut().zip(&chunk.d_norm_head) {
            *a += b0;
        }
        loss += chunk.loss;
        correct += chunk.correct;
    }
    grads.head = margin::head_norm_vjp(&norm_head, &norms, &d_norm_head, d);
    (loss / b as f64, correct, grads)
}

/// Nearest-head classification accuracy on the clean images.
pub fn clean_accuracy(params: &EncoderParams<f32>, dataset: &IdentityDataset) -> Result<f64> {
    let d = params.arch.d_emb;
    let (norm_head, _) = margin::normalize_head(&params.head, d);
    let images: Vec<&Image<f32>> = dataset.samples.iter().map(|s| &s.image).collect();
    let embeddings = embed_images(params, &images)?;
    let correct: usize = embeddings
        .par_iter()
        .zip(&dataset.samples)
        .map(|(emb, s)| {
            let k = params.arch.num_classes;
            let mut best = 0usize;
            let mut best_cos = f32::NEG_INFINITY;
            for ki in 0..k {
                let row = &norm_head[ki * d..(ki + 1) * d];
                let cos: f32 = emb.iter().zip(row).map(|(a, b)| a * b).sum();
                if cos > best_cos {
                    best_cos = cos;
                    best = ki;
                }
            }
            usize::from(best == s.id_label as usize)
        })
        .sum();
    Ok(correct as f64 / dataset.samples.len() as f64)
}

/// Embeds a list of images in deterministic order.
pub fn embed_images(params: &EncoderParams<f32>, images: &[&Image<f32>]) -> Result<Vec<Vec<f32>>> {
    let arch = params.arch;
    let sample = arch.channels * arch.image_size * arch.image_size;
    let d = arch.d_emb;
    let mut out = vec![vec![0.0f32; d]; images.len()];
    out.par_iter_mut().zip(images.par_iter()).for_each(|(emb, img)| {
        let mut x = vec![0.0f32; sample];
        pack_chw(img, &mut x);
        net::forward_single(params, &x, emb);
    });
    Ok(out)
}

fn learning_rate(cfg: &PretrainConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total_steps.max(1) as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Trains an encoder on the dataset. Bit-identical for a fixed config across
/// runs and thread counts.
pub fn pretrain(
    dataset: &IdentityDataset,
    pcfg: &PretrainConfig,
    mcfg: &MarginConfig,
    bcfg: &BlendConfig,
) -> Result<EncoderCheckpoint> {
    pcfg.validate()?;
    mcfg.validate()?;
    bcfg.validate()?;
    dataset.validate()?;
    if dataset.num_identities() != mcfg.classes {
        return Err(Error::DatasetMismatch(format!(
            "dataset has {} identities but margin head expects {}",
            dataset.num_identities(),
            mcfg.classes
        )));
    }
    let cfg = &dataset.config;
    let arch = EncoderArch::new(cfg.image_size, cfg.channels, mcfg.classes);
    arch.validate()?;

    let mut params = EncoderParams::<f32>::init(arch, rng_at(pcfg.seed, &[DOMAIN_INIT]).gen())?;
    let mut velocity = ParamGrads::<f32>::zeros(arch);
    let n = dataset.samples.len();
    let sample_len = arch.channels * arch.image_size * arch.image_size;
    let steps_per_epoch = n.div_ceil(pcfg.batch_size);
    let total_steps = pcfg.epochs * steps_per_epoch;

    let mut training_log = Vec::with_capacity(pcfg.epochs);
    let mut step = 0usize;

    for epoch in 0..pcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_at(pcfg.seed, &[DOMAIN_SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        let mut replaced = 0usize;

        for batch_ids in order.chunks(pcfg.batch_size) {
            let b = batch_ids.len();
            let mut batch = vec![0.0f32; b * sample_len];
            let mut labels = vec![0u32; b];
            let replaced_flags: Vec<bool> = batch
                .par_chunks_mut(sample_len)
                .zip(batch_ids.par_iter())
                .map(|(slot, &idx)| {
                    let s = &dataset.samples[idx];
                    let mut rng =
                        rng_at(pcfg.seed, &[DOMAIN_REPLACE, epoch as u64, idx as u64]);
                    let swap = rng.gen::<f64>() < pcfg.p_replace;
                    if swap {
                        let blended = pseudo_positive(s, dataset, &mut rng, bcfg)
                            .expect("pseudo-positive generation failed");
                        pack_chw(&blended.image, slot);
                    } else {
                        pack_chw(&s.image, slot);
                    }
                    swap
                })
                .collect();
            for (i, &idx) in batch_ids.iter().enumerate() {
                labels[i] = dataset.samples[idx].id_label;
            }
            replaced += replaced_flags.iter().filter(|&&f| f).count();

            let (loss, correct, grads) = margin_step(&params, &batch, &labels, mcfg);
            epoch_loss += loss * b as f64;
            epoch_correct += correct;

            let lr = learning_rate(pcfg, step, total_steps) as f32;
            let momentum = pcfg.momentum as f32;
            for ((_, v), (_, g)) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
                for (vi, &gi) in v.data.iter_mut().zip(&g.data) {
                    *vi = momentum * *vi - lr * gi;
                }
            }
            for ((_, p), (_, v)) in params.tensors_mut().into_iter().zip(velocity.tensors()) {
                for (pi, &vi) in p.data.iter_mut().zip(&v.data) {
                    *pi += vi;
                }
            }
            step += 1;
        }

        training_log.push(EpochStats {
            epoch,
            loss: epoch_loss / n as f64,
            accuracy: epoch_correct as f64 / n as f64,
            replaced_fraction: replaced as f64 / n as f64,
        });
    }

    let final_clean_accuracy = clean_accuracy(&params, dataset)?;
    Ok(EncoderCheckpoint {
        params,
        pretrain_cfg: pcfg.clone(),
        margin_cfg: *mcfg,
        blend_cfg: bcfg.clone(),
        training_log,
        final_clean_accuracy,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    arch: EncoderArch,
    margin_cfg: MarginConfig,
    pretrain_cfg: PretrainConfig,
    blend_cfg: BlendConfig,
    training_log: Vec<EpochStats>,
    final_clean_accuracy: f64,
}

/// Writes `model.json`, `weights.f32`, and `training_log.csv` into a directory.
pub fn save_checkpoint(ckpt: &EncoderCheckpoint, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: ckpt.params.arch,
        margin_cfg: ckpt.margin_cfg,
        pretrain_cfg: ckpt.pretrain_cfg.clone(),
        blend_cfg: ckpt.blend_cfg.clone(),
        training_log: ckpt.training_log.clone(),
        final_clean_accuracy: ckpt.final_clean_accuracy,
    };
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("model.json"))?, &meta)?;
    net::write_weights(&ckpt.params, &dir.join("weights.f32"))?;

    let mut csv = String::from("epoch,loss,accuracy\n");
    for row in &ckpt.training_log {
        csv.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.accuracy));
    }
    std::fs::write(dir.join("training_log.csv"), csv)?;
    Ok(())
}

pub fn load_checkpoint(dir: &std::path::Path) -> Result<EncoderCheckpoint> {
    let meta: CheckpointMeta =
        serde_json::from_reader(std::fs::File::open(dir.join("model.json"))?)?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }
    if meta.training_log.len() != meta.pretrain_cfg.epochs {
        return Err(Error::Format("training log length != epochs".into()));
    }
    let params = net::read_weights(meta.arch, &dir.join("weights.f32"))?;
    Ok(EncoderCheckpoint {
        params,
        pretrain_cfg: meta.pretrain_cfg,
        margin_cfg: meta.margin_cfg,
        blend_cfg: meta.blend_cfg,
        training_log: meta.training_log,
        final_clean_accuracy: meta.final_clean_accuracy,
    })
}
