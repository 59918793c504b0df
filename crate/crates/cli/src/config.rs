//! Run configuration: one section per subsystem, loadable from a TOML file
//! with every leaf key overridable on the command line as
//! `--section.key=value`. Unknown keys are rejected.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use swaplab_core::blend::BlendConfig;
use swaplab_core::losses::{LossWeights, Reduction};
use swaplab_core::margin::MarginConfig;
use swaplab_core::pretrain::PretrainConfig;
use swaplab_core::seeding::derive_seed;
use swaplab_core::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub lambda_id: f64,
    pub lambda_rec: f64,
    pub lambda_cyc: f64,
    pub reduction: Reduction,
    /// Probability that an evaluation pair shares one identity.
    pub p_same: f64,
    pub pairs: usize,
}

impl Default for LossesSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_id: w.lambda_id,
            lambda_rec: w.lambda_rec,
            lambda_cyc: w.lambda_cyc,
            reduction: Reduction::Sum,
            p_same: 0.2,
            pairs: 100,
        }
    }
}

impl LossesSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_id: self.lambda_id,
            lambda_rec: self.lambda_rec,
            lambda_cyc: self.lambda_cyc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub anchors_per_identity: usize,
    pub seed: u64,
    pub verification_pairs: usize,
    /// Held-out universe used for verification; identities never seen in
    /// training.
    pub holdout_identities: usize,
    pub holdout_images_per_identity: usize,
    pub saliency_images: usize,
    pub saliency_stride: usize,
    pub saliency_fill: f64,
    pub sweep_p: Vec<f64>,
    pub eval_pairs: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            anchors_per_identity: 1,
            seed: 0,
            verification_pairs: 2000,
            holdout_identities: 50,
            holdout_images_per_identity: 10,
            saliency_images: 50,
            saliency_stride: 2,
            saliency_fill: 0.5,
            sweep_p: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, reseeds every subsystem deterministically.
    pub master_seed: Option<u64>,
    pub synth: SynthConfig,
    pub blend: BlendConfig,
    pub margin: MarginConfig,
    pub pretrain: PretrainConfig,
    pub losses: LossesSection,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    /// Applies the master seed to every subsystem seed.
    pub fn apply_master_seed(&mut self, seed: u64) {
        self.master_seed = Some(seed);
        self.synth.master_seed = derive_seed(seed, &[0x5e, 1]);
        self.pretrain.seed = derive_seed(seed, &[0x5e, 2]);
        self.analysis.seed = derive_seed(seed, &[0x5e, 3]);
    }

    /// Seed for the held-out verification universe.
    pub fn holdout_seed(&self) -> u64 {
        derive_seed(self.synth.master_seed, &[0x5e, 4])
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.blend.validate()?;
        self.margin.validate()?;
        self.pretrain.validate()?;
        self.losses.weights().validate()?;
        if self.margin.classes != self.synth.num_identities {
            bail!(
                "margin.classes ({}) must equal synth.num_identities ({})",
                self.margin.classes,
                self.synth.num_identities
            );
        }
        if !(0.0..=1.0).contains(&self.losses.p_same) {
            bail!("losses.p_same must lie in [0, 1]");
        }
        for &p in &self.analysis.sweep_p {
            if !(0.0..=1.0).contains(&p) {
                bail!("analysis.sweep_p entries must lie in [0, 1]");
            }
        }
        if self.analysis.holdout_identities < 2 || self.analysis.holdout_images_per_identity < 2 {
            bail!("holdout universe needs at least 2 identities with 2 images each");
        }
        Ok(())
    }
}

/// Every overridable leaf key, with a short description for `--help`.
pub const OVERRIDE_KEYS: &[(&str, &str)] = &[
    ("master_seed", "master seed applied to every subsystem"),
    ("synth.image_size", "pixels per image side"),
    ("synth.channels", "color channels (3)"),
    ("synth.num_identities", "identity count"),
    ("synth.images_per_identity", "images per identity"),
    ("synth.d_id", "identity latent dimension"),
    ("synth.d_attr", "attribute latent dimension"),
    ("synth.rho", "identity-attribute correlation in [0,1]"),
    ("synth.landmark_count", "landmark count (16)"),
    ("synth.master_seed", "dataset seed"),
    ("blend.candidate_pool_size", "candidate pool size"),
    ("blend.mask_variant", "intersection | source_only | candidate_only"),
    ("blend.blur_sigma", "mask blur sigma, pixels"),
    ("blend.color_region", "union_mask | whole_image"),
    ("margin.scale", "logit scale"),
    ("margin.margin", "additive angular margin, radians"),
    ("margin.classes", "class count"),
    ("pretrain.p_replace", "pseudo-positive replacement probability"),
    ("pretrain.epochs", "training epochs"),
    ("pretrain.batch_size", "batch size"),
    ("pretrain.lr", "base learning rate"),
    ("pretrain.momentum", "SGD momentum"),
    ("pretrain.lr_schedule", "cosine | constant"),
    ("pretrain.seed", "training seed"),
    ("losses.lambda_id", "identity loss weight"),
    ("losses.lambda_rec", "reconstruction loss weight"),
    ("losses.lambda_cyc", "cycle loss weight"),
    ("losses.reduction", "sum | mean"),
    ("losses.p_same", "same-identity pair probability"),
    ("losses.pairs", "evaluation pair count"),
    ("analysis.anchors_per_identity", "anchors per identity"),
    ("analysis.seed", "analysis seed"),
    ("analysis.verification_pairs", "verification pair count"),
    ("analysis.holdout_identities", "held-out identity count"),
    ("analysis.holdout_images_per_identity", "held-out images per identity"),
    ("analysis.saliency_images", "images per saliency comparison"),
    ("analysis.saliency_stride", "occluder stride"),
    ("analysis.saliency_fill", "occluder fill value"),
    ("analysis.sweep_p", "replace probabilities, e.g. [0.0,0.5,1.0]"),
    ("analysis.eval_pairs", "swap-metric pair count"),
];

/// Splits raw arguments into (`--section.key=value` overrides, the rest).
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let known: Vec<&str> = OVERRIDE_KEYS.iter().map(|(k, _)| *k).collect();
    for arg in args {
        let looks_dotted = arg.starts_with("--")
            && arg.contains('=')
            && arg[2..arg.find('=').unwrap()].contains('.');
        let is_master = arg.starts_with("--master_seed=");
        if looks_dotted || is_master {
            let eq = arg.find('=').unwrap();
            let key = arg[2..eq].to_string();
            if !known.contains(&key.as_str()) {
                bail!("unknown config key --{key}");
            }
            overrides.push((key, arg[eq + 1..].to_string()));
        } else {
            rest.push(arg);
        }
    }
    Ok((overrides, rest))
}

fn parse_toml_value(raw: &str) -> toml::Value {
    // Accept bare scalars and TOML literals; fall back to a plain string.
    let candidate = format!("v = {raw}");
    if let Ok(table) = candidate.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
        }
        Some((head, tail)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(inner) = entry {
                set_dotted(inner, tail, value);
            }
        }
    }
}

/// Loads the config file (when given), applies overrides, and deserializes
/// strictly.
pub fn load_config(
    path: Option<&std::path::Path>,
    overrides: &[(String, String)],
    master_seed: Option<u64>,
) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("config file {}", p.display()))?;
            text.parse::<toml::Table>().map_err(|e| anyhow!("config parse error: {e}"))?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        set_dotted(&mut table, key, parse_toml_value(raw));
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("config parse error: {e}"))?;
    if let Some(seed) = master_seed {
        config.apply_master_seed(seed);
    } else if let Some(seed) = config.master_seed {
        config.apply_master_seed(seed);
    }
    Ok(config)
}
