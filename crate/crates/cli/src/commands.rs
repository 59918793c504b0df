//! Subcommand implementations. Every command materializes its artifacts
//! under an output directory and finishes by writing a manifest.

use crate::config::RunConfig;
use crate::error::{invariant, missing_input, CodedError};
use crate::manifest::write_manifest;
use anyhow::{Context, Result};
use serde::Serialize;
use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};
use swaplab_core::analysis::saliency::{default_sizes, inner_fraction_over_dataset};
use swaplab_core::analysis::verify::{make_verification_pairs, verification_accuracy};
use swaplab_core::analysis::{
    metrics, similarity_distributions, DistributionReport, Embedder, SweepPoint,
};
use swaplab_core::blend::pseudo_positive;
use swaplab_core::image::{write_pgm, write_ppm, Mask};
use swaplab_core::losses::{evaluate_pair, sample_pair, LossReport, OracleBlender};
use swaplab_core::pretrain::{load_checkpoint, pretrain, save_checkpoint, EncoderCheckpoint};
use swaplab_core::seeding::rng_at;
use swaplab_core::shard::{load_dataset, save_dataset};
use swaplab_core::synth::{gen_dataset as synth_gen, IdentityDataset, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Train,
    Holdout,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn load_dataset_checked(dir: &Path) -> Result<IdentityDataset> {
    if !dir.join("meta.json").exists() {
        return Err(missing_input(&format!("dataset {}", dir.display())));
    }
    load_dataset(dir).map_err(invariant)
}

fn load_checkpoint_checked(dir: &Path) -> Result<EncoderCheckpoint> {
    if !dir.join("model.json").exists() {
        return Err(missing_input(&format!("model {}", dir.display())));
    }
    load_checkpoint(dir).map_err(invariant)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen_dataset_cmd(cfg: &RunConfig, out: &Path, role: DatasetRole) -> Result<()> {
    cfg.validate().map_err(|e| CodedError::invariant(e.to_string()))?;
    let synth_cfg = match role {
        DatasetRole::Train => cfg.synth.clone(),
        DatasetRole::Holdout => SynthConfig {
            num_identities: cfg.analysis.holdout_identities,
            images_per_identity: cfg.analysis.holdout_images_per_identity,
            master_seed: cfg.holdout_seed(),
            ..cfg.synth.clone()
        },
    };
    let dataset = synth_gen(&synth_cfg).map_err(invariant)?;
    ensure_dir(out)?;
    save_dataset(&dataset, out).map_err(invariant)?;
    write_manifest(out, "gen-dataset", cfg)?;
    println!(
        "dataset: {} samples ({} identities) -> {}",
        dataset.samples.len(),
        dataset.num_identities(),
        out.display()
    );
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate().map_err(|e| CodedError::invariant(e.to_string()))?;
    let dataset = load_dataset_checked(dataset_dir)?;
    let ckpt = pretrain(&dataset, &cfg.pretrain, &cfg.margin, &cfg.blend).map_err(invariant)?;
    ensure_dir(out)?;
    save_checkpoint(&ckpt, out).map_err(invariant)?;
    write_manifest(out, "pretrain", cfg)?;
    println!(
        "pretrained p={} for {} epochs: final loss {:.4}, clean accuracy {:.4} -> {}",
        cfg.pretrain.p_replace,
        cfg.pretrain.epochs,
        ckpt.training_log.last().map_or(f64::NAN, |r| r.loss),
        ckpt.final_clean_accuracy,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    seed: u64,
    population_size: usize,
    mean_same: f64,
    std_same: f64,
    mean_swapped: f64,
    std_swapped: f64,
    mean_closest: f64,
    std_closest: f64,
    gap: f64,
    overlap: f64,
    config: &'a RunConfig,
}

fn write_distribution_artifacts(report: &DistributionReport, cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_json(
        &out.join("report.json"),
        &AnalyzeSummary {
            seed: cfg.analysis.seed,
            population_size: report.sims_same.len(),
            mean_same: report.mean_same,
            std_same: report.std_same,
            mean_swapped: report.mean_swapped,
            std_swapped: report.std_swapped,
            mean_closest: report.mean_closest,
            std_closest: report.std_closest,
            gap: report.gap,
            overlap: report.overlap,
            config: cfg,
        },
    )?;

    let mut csv = String::from("population,similarity\n");
    for &s in &report.sims_same {
        writeln!(csv, "same,{s}").unwrap();
    }
    for &s in &report.sims_swapped {
        writeln!(csv, "swapped,{s}").unwrap();
    }
    for &s in &report.sims_closest {
        writeln!(csv, "closest,{s}").unwrap();
    }
    std::fs::write(out.join("similarities.csv"), csv)?;

    let mut csv = String::from("bin_low,bin_high,same,swapped,closest\n");
    for b in 0..report.hist_same.len() {
        let lo = -1.0 + 0.02 * b as f64;
        writeln!(
            csv,
            "{:.2},{:.2},{},{},{}",
            lo,
            lo + 0.02,
            report.hist_same[b],
            report.hist_swapped[b],
            report.hist_closest[b]
        )
        .unwrap();
    }
    std::fs::write(out.join("histogram.csv"), csv)?;
    Ok(())
}

pub fn analyze_cmd(cfg: &RunConfig, dataset_dir: &Path, model_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    let ckpt = load_checkpoint_checked(model_dir)?;
    let report = similarity_distributions(
        &ckpt.params,
        &dataset,
        cfg.analysis.anchors_per_identity,
        &cfg.blend,
        cfg.analysis.seed,
    )
    .map_err(invariant)?;
    write_distribution_artifacts(&report, cfg, out)?;
    write_manifest(out, "analyze", cfg)?;
    println!(
        "analyze: mean(same)={:.4} mean(swapped)={:.4} gap={:.4} overlap={:.4}",
        report.mean_same, report.mean_swapped, report.gap, report.overlap
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    points: &'a [SweepPoint],
    config: &'a RunConfig,
}

pub fn sweep_cmd(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate().map_err(|e| CodedError::invariant(e.to_string()))?;
    let dataset = load_dataset_checked(dataset_dir)?;
    ensure_dir(out)?;
    let mut points = Vec::new();
    for &p in &cfg.analysis.sweep_p {
        let run_cfg = swaplab_core::pretrain::PretrainConfig { p_replace: p, ..cfg.pretrain.clone() };
        let ckpt = pretrain(&dataset, &run_cfg, &cfg.margin, &cfg.blend).map_err(invariant)?;
        let report = similarity_distributions(
            &ckpt.params,
            &dataset,
            cfg.analysis.anchors_per_identity,
            &cfg.blend,
            cfg.analysis.seed,
        )
        .map_err(invariant)?;
        let model_dir = out.join(format!("model_p{:03}", (p * 100.0).round() as u32));
        ensure_dir(&model_dir)?;
        save_checkpoint(&ckpt, &model_dir).map_err(invariant)?;
        write_distribution_artifacts(&report, cfg, &model_dir.join("analysis"))?;
        println!(
            "sweep p={p}: gap={:.4} overlap={:.4} clean_acc={:.4}",
            report.gap, report.overlap, ckpt.final_clean_accuracy
        );
        points.push(SweepPoint {
            p_replace: p,
            gap: report.gap,
            overlap: report.overlap,
            mean_same: report.mean_same,
            mean_swapped: report.mean_swapped,
            final_clean_accuracy: ckpt.final_clean_accuracy,
        });
    }
    let mut csv = String::from("p_replace,gap,overlap,mean_same,mean_swapped,clean_accuracy\n");
    for pt in &points {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            pt.p_replace, pt.gap, pt.overlap, pt.mean_same, pt.mean_swapped, pt.final_clean_accuracy
        )
        .unwrap();
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    write_json(&out.join("sweep.json"), &SweepSummary { points: &points, config: cfg })?;
    write_manifest(out, "sweep", cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    accuracy: f64,
    pairs: usize,
    seed: u64,
    config: &'a RunConfig,
}

pub fn verify_cmd(cfg: &RunConfig, dataset_dir: &Path, model_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    let ckpt = load_checkpoint_checked(model_dir)?;
    let pairs = make_verification_pairs(&dataset, cfg.analysis.verification_pairs, cfg.analysis.seed)
        .map_err(invariant)?;
    let accuracy = verification_accuracy(&ckpt.params, &dataset, &pairs).map_err(invariant)?;
    ensure_dir(out)?;
    write_json(
        &out.join("verification.json"),
        &VerifySummary { accuracy, pairs: pairs.len(), seed: cfg.analysis.seed, config: cfg },
    )?;
    write_manifest(out, "verify", cfg)?;
    println!("verification accuracy: {accuracy:.4} over {} pairs", pairs.len());
    Ok(())
}

#[derive(Serialize)]
struct LossesSummary<'a> {
    rows: Vec<LossReport>,
    mean_id: f64,
    mean_mask: f64,
    mean_rec: f64,
    mean_cyc: f64,
    mean_total: f64,
    adv_included: bool,
    pairs: usize,
    seed: u64,
    config: &'a RunConfig,
}

pub fn losses_cmd(
    cfg: &RunConfig,
    dataset_dir: &Path,
    model_dir: &Path,
    pairs: usize,
    seed: u64,
    report_path: &Path,
) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    let ckpt = load_checkpoint_checked(model_dir)?;
    let oracle = OracleBlender { cfg: cfg.blend.clone() };
    let weights = cfg.losses.weights();
    let mut rows = Vec::with_capacity(pairs);
    let mut rng = rng_at(seed, &[0x66]);
    for _ in 0..pairs {
        let pair = sample_pair(&dataset, &mut rng, cfg.losses.p_same).map_err(invariant)?;
        let report = evaluate_pair(&ckpt.params, &oracle, &pair, &weights, cfg.losses.reduction)
            .map_err(invariant)?;
        rows.push(report);
    }
    let n = rows.len() as f64;
    let summary = LossesSummary {
        mean_id: rows.iter().map(|r| r.id_loss).sum::<f64>() / n,
        mean_mask: rows.iter().map(|r| r.mask_loss).sum::<f64>() / n,
        mean_rec: rows.iter().map(|r| r.rec_loss).sum::<f64>() / n,
        mean_cyc: rows.iter().map(|r| r.cyc_loss).sum::<f64>() / n,
        mean_total: rows.iter().map(|r| r.total).sum::<f64>() / n,
        adv_included: false,
        pairs: rows.len(),
        seed,
        rows,
        config: cfg,
    };
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_json(report_path, &summary)?;
    println!(
        "losses over {} pairs: id={:.4} mask={:.2} rec={:.2} cyc={:.2} total={:.2}",
        summary.pairs, summary.mean_id, summary.mean_mask, summary.mean_rec, summary.mean_cyc, summary.mean_total
    );
    Ok(())
}

#[derive(Serialize)]
struct SaliencySummary<'a> {
    per_image: Vec<(usize, f64)>,
    mean_inner_fraction: f64,
    sizes: Vec<usize>,
    stride: usize,
    fill: f32,
    seed: u64,
    config: &'a RunConfig,
}

pub fn saliency_cmd(cfg: &RunConfig, dataset_dir: &Path, model_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    let ckpt = load_checkpoint_checked(model_dir)?;
    let sizes = default_sizes(dataset.config.image_size);
    let stride = cfg.analysis.saliency_stride;
    let fill = cfg.analysis.saliency_fill as f32;
    let (per_image, mean) = inner_fraction_over_dataset(
        &ckpt.params,
        &dataset,
        cfg.analysis.saliency_images,
        &sizes,
        stride,
        fill,
        cfg.analysis.seed,
    )
    .map_err(invariant)?;
    ensure_dir(out)?;

    // Full map artifacts for the first few images.
    for &(idx, _) in per_image.iter().take(4) {
        let s = &dataset.samples[idx];
        let map = swaplab_core::analysis::saliency::occlusion_saliency(
            &ckpt.params,
            &s.image,
            &s.image,
            &sizes,
            stride,
            fill,
        )
        .map_err(invariant)?;
        let mut csv = String::new();
        for y in 0..map.height {
            let row: Vec<String> =
                (0..map.width).map(|x| format!("{}", map.values[y * map.width + x])).collect();
            writeln!(csv, "{}", row.join(",")).unwrap();
        }
        std::fs::write(out.join(format!("saliency_{idx}.csv")), csv)?;
        let peak = map.values.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        let normalized = Mask {
            height: map.height,
            width: map.width,
            data: map.values.iter().map(|v| v / peak).collect(),
        };
        write_pgm(&normalized, &out.join(format!("saliency_{idx}.pgm"))).map_err(invariant)?;
    }

    write_json(
        &out.join("saliency.json"),
        &SaliencySummary {
            per_image,
            mean_inner_fraction: mean,
            sizes,
            stride,
            fill,
            seed: cfg.analysis.seed,
            config: cfg,
        },
    )?;
    write_manifest(out, "saliency", cfg)?;
    println!("saliency mean inner fraction: {mean:.4}");
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    table: metrics::MetricTable,
    config: &'a RunConfig,
}

pub fn eval_cmd(cfg: &RunConfig, dataset_dir: &Path, model_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    let mut checkpoints = Vec::new();
    for dir in model_dirs {
        // Name encoders by directory basename so reports carry no absolute
        // paths and stay byte-identical across output locations.
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        checkpoints.push((name, load_checkpoint_checked(dir)?));
    }
    let encoders: Vec<(&str, &dyn Embedder)> = checkpoints
        .iter()
        .map(|(name, ckpt)| (name.as_str(), &ckpt.params as &dyn Embedder))
        .collect();
    let mut rng = rng_at(cfg.analysis.seed, &[0x77]);
    let pairs: Vec<_> = (0..cfg.analysis.eval_pairs)
        .map(|_| sample_pair(&dataset, &mut rng, 0.0))
        .collect::<swaplab_core::Result<_>>()
        .map_err(invariant)?;
    let oracle = OracleBlender { cfg: cfg.blend.clone() };
    let table = metrics::swap_metrics(&encoders, &oracle, &pairs).map_err(invariant)?;

    ensure_dir(out)?;
    let mut csv = String::from("encoder,identity_distance,identity_distance_relative\n");
    for row in &table.per_encoder {
        writeln!(csv, "{},{},{}", row.name, row.identity_distance, row.identity_distance_relative)
            .unwrap();
    }
    writeln!(
        csv,
        "attribute,{},{}",
        table.attribute_distance, table.attribute_distance_relative
    )
    .unwrap();
    std::fs::write(out.join("metrics.csv"), csv)?;
    write_json(&out.join("metrics.json"), &EvalSummary { table, config: cfg })?;
    write_manifest(out, "eval", cfg)?;
    Ok(())
}

pub fn blend_preview_cmd(
    cfg: &RunConfig,
    dataset_dir: &Path,
    index: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let dataset = load_dataset_checked(dataset_dir)?;
    if index >= dataset.samples.len() {
        return Err(CodedError::invariant(format!(
            "sample index {index} outside dataset of {}",
            dataset.samples.len()
        ))
        .into());
    }
    let anchor = &dataset.samples[index];
    let mut rng = rng_at(seed, &[0x88, index as u64]);
    let blended = pseudo_positive(anchor, &dataset, &mut rng, &cfg.blend).map_err(invariant)?;
    ensure_dir(out)?;
    write_ppm(&anchor.image, &out.join("anchor.ppm")).map_err(invariant)?;
    write_ppm(&dataset.samples[blended.candidate_index].image, &out.join("candidate.ppm"))
        .map_err(invariant)?;
    write_pgm(&blended.blend_mask, &out.join("mask.pgm")).map_err(invariant)?;
    write_ppm(&blended.image, &out.join("blended.ppm")).map_err(invariant)?;
    write_manifest(out, "blend-preview", cfg)?;
    println!(
        "blend preview: anchor {} (identity {}) + candidate {} (identity {}) -> {}",
        index,
        blended.anchor_id,
        blended.candidate_index,
        blended.candidate_id,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReproSummary {
    gap_p0: f64,
    gap_p05: f64,
    overlap_p0: f64,
    overlap_p05: f64,
    clean_accuracy_p0: f64,
    clean_accuracy_p05: f64,
    verification_p0: f64,
    verification_p05: f64,
    contrast_p0: f64,
    contrast_p05: f64,
    saliency_inner_p0: f64,
    saliency_inner_p05: f64,
}

/// End-to-end pipeline: datasets, both reference encoders, and every
/// analysis, all under one output directory.
pub fn repro_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate().map_err(|e| CodedError::invariant(e.to_string()))?;
    ensure_dir(out)?;

    gen_dataset_cmd(cfg, &out.join("dataset"), DatasetRole::Train)?;
    gen_dataset_cmd(cfg, &out.join("holdout"), DatasetRole::Holdout)?;

    let mut results = Vec::new();
    for p in [0.0f64, 0.5] {
        let tag = format!("p{:03}", (p * 100.0).round() as u32);
        let mut run_cfg = cfg.clone();
        run_cfg.pretrain.p_replace = p;
        pretrain_cmd(&run_cfg, &out.join("dataset"), &out.join(format!("model_{tag}")))?;
        analyze_cmd(
            &run_cfg,
            &out.join("dataset"),
            &out.join(format!("model_{tag}")),
            &out.join(format!("analysis_{tag}")),
        )?;
        verify_cmd(
            &run_cfg,
            &out.join("holdout"),
            &out.join(format!("model_{tag}")),
            &out.join(format!("verify_{tag}")),
        )?;
        saliency_cmd(
            &run_cfg,
            &out.join("dataset"),
            &out.join(format!("model_{tag}")),
            &out.join(format!("saliency_{tag}")),
        )?;
        results.push(tag);
    }

    losses_cmd(
        cfg,
        &out.join("dataset"),
        &out.join("model_p050"),
        cfg.losses.pairs,
        cfg.analysis.seed,
        &out.join("losses.json"),
    )?;
    eval_cmd(
        cfg,
        &out.join("dataset"),
        &[out.join("model_p000"), out.join("model_p050")],
        &out.join("eval"),
    )?;

    // Encoder contrast on blended pseudo-positives.
    let dataset = load_dataset_checked(&out.join("dataset"))?;
    let p0 = load_checkpoint_checked(&out.join("model_p000"))?;
    let p05 = load_checkpoint_checked(&out.join("model_p050"))?;
    let contrast_p0 = metrics::pseudo_pair_identity_distance(
        &p0.params,
        &dataset,
        cfg.losses.pairs.max(100),
        &cfg.blend,
        cfg.analysis.seed,
    )
    .map_err(invariant)?;
    let contrast_p05 = metrics::pseudo_pair_identity_distance(
        &p05.params,
        &dataset,
        cfg.losses.pairs.max(100),
        &cfg.blend,
        cfg.analysis.seed,
    )
    .map_err(invariant)?;

    let read_json = |path: PathBuf| -> Result<serde_json::Value> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    };
    let gap = |tag: &str| -> Result<(f64, f64)> {
        let v = read_json(out.join(format!("analysis_{tag}/report.json")))?;
        Ok((v["gap"].as_f64().unwrap_or(f64::NAN), v["overlap"].as_f64().unwrap_or(f64::NAN)))
    };
    let verify_acc = |tag: &str| -> Result<f64> {
        let v = read_json(out.join(format!("verify_{tag}/verification.json")))?;
        Ok(v["accuracy"].as_f64().unwrap_or(f64::NAN))
    };
    let saliency_frac = |tag: &str| -> Result<f64> {
        let v = read_json(out.join(format!("saliency_{tag}/saliency.json")))?;
        Ok(v["mean_inner_fraction"].as_f64().unwrap_or(f64::NAN))
    };
    let (gap_p0, overlap_p0) = gap("p000")?;
    let (gap_p05, overlap_p05) = gap("p050")?;
    let summary = ReproSummary {
        gap_p0,
        gap_p05,
        overlap_p0,
        overlap_p05,
        clean_accuracy_p0: p0.final_clean_accuracy,
        clean_accuracy_p05: p05.final_clean_accuracy,
        verification_p0: verify_acc("p000")?,
        verification_p05: verify_acc("p050")?,
        contrast_p0,
        contrast_p05,
        saliency_inner_p0: saliency_frac("p000")?,
        saliency_inner_p05: saliency_frac("p050")?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_manifest(out, "repro", cfg)?;
    println!(
        "repro complete: gap(p=0)={gap_p0:.4} gap(p=0.5)={gap_p05:.4} \
         verification {:.4} vs {:.4}",
        summary.verification_p0, summary.verification_p05
    );
    let _ = results;
    Ok(())
}
