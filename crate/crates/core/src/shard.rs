//! On-disk dataset shards.
//!
//! A shard directory holds `meta.json` plus one raw little-endian file per
//! tensor class: `images.f32` (N x H x W x C), `landmarks.f32` (N x L x 2),
//! `masks.f32` (N x H x W), `labels.u32` (N), and `attrs.f32` (N x d_attr).
//! Dimensions are declared in the metadata; everything is row-major.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::synth::{FaceSample, IdentityDataset, SynthConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SHARD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardMeta {
    pub format_version: u32,
    pub config: SynthConfig,
    pub master_seed: u64,
    pub num_samples: usize,
    /// identity label -> sample indices
    pub identity_index: Vec<Vec<usize>>,
    /// file name -> dimensions
    pub tensor_dims: BTreeMap<String, Vec<usize>>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn save_dataset(dataset: &IdentityDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &dataset.config;
    let n = dataset.samples.len();
    let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.channels);

    write_f32(
        &dir.join("images.f32"),
        dataset.samples.iter().flat_map(|s| s.image.data.iter().copied()),
    )?;
    write_f32(
        &dir.join("landmarks.f32"),
        dataset
            .samples
            .iter()
            .flat_map(|s| s.landmarks.iter().flat_map(|p| p.iter().copied())),
    )?;
    write_f32(
        &dir.join("masks.f32"),
        dataset.samples.iter().flat_map(|s| s.inner_mask.data.iter().copied()),
    )?;
    write_f32(
        &dir.join("attrs.f32"),
        dataset.samples.iter().flat_map(|s| s.z_attr.iter().copied()),
    )?;
    let mut label_bytes = Vec::with_capacity(n * 4);
    for s in &dataset.samples {
        label_bytes.extend_from_slice(&s.id_label.to_le_bytes());
    }
    std::fs::write(dir.join("labels.u32"), label_bytes)?;

    let mut tensor_dims = BTreeMap::new();
    tensor_dims.insert("images.f32".to_string(), vec![n, h, w, c]);
    tensor_dims.insert("landmarks.f32".to_string(), vec![n, cfg.landmark_count, 2]);
    tensor_dims.insert("masks.f32".to_string(), vec![n, h, w]);
    tensor_dims.insert("labels.u32".to_string(), vec![n]);
    tensor_dims.insert("attrs.f32".to_string(), vec![n, cfg.d_attr]);

    let meta = ShardMeta {
        format_version: SHARD_FORMAT_VERSION,
        config: cfg.clone(),
        master_seed: cfg.master_seed,
        num_samples: n,
        identity_index: dataset.by_identity.clone(),
        tensor_dims,
    };
    let file = std::fs::File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(file, &meta)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<IdentityDataset> {
    let meta_path = dir.join("meta.json");
    let meta: ShardMeta = serde_json::from_reader(std::fs::File::open(&meta_path)?)?;
    if meta.format_version != SHARD_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported shard format version {}",
            meta.format_version
        )));
    }
    let cfg = meta.config.clone();
    let n = meta.num_samples;
    let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.channels);

    let images = read_f32(&dir.join("images.f32"), n * h * w * c)?;
    let landmarks = read_f32(&dir.join("landmarks.f32"), n * cfg.landmark_count * 2)?;
    let masks = read_f32(&dir.join("masks.f32"), n * h * w)?;
    let attrs = read_f32(&dir.join("attrs.f32"), n * cfg.d_attr)?;
    let label_bytes = std::fs::read(dir.join("labels.u32"))?;
    if label_bytes.len() != n * 4 {
        return Err(Error::Format("labels.u32 has wrong length".into()));
    }
    let labels: Vec<u32> = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = Image::from_vec(h, w, c, images[i * h * w * c..(i + 1) * h * w * c].to_vec())?;
        let lm: Vec<[f32; 2]> = landmarks[i * cfg.landmark_count * 2..(i + 1) * cfg.landmark_count * 2]
            .chunks_exact(2)
            .map(|p| [p[0], p[1]])
            .collect();
        let inner_mask = Mask::from_vec(h, w, masks[i * h * w..(i + 1) * h * w].to_vec())?;
        samples.push(FaceSample {
            image,
            landmarks: lm,
            inner_mask,
            id_label: labels[i],
            z_attr: attrs[i * cfg.d_attr..(i + 1) * cfg.d_attr].to_vec(),
        });
    }

    let dataset = IdentityDataset { samples, by_identity: meta.identity_index, config: cfg };
    dataset.validate()?;
    Ok(dataset)
}
