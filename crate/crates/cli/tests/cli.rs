//! End-to-end tests driving the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swaplab"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
master_seed = 11

[synth]
num_identities = 8
images_per_identity = 4

[margin]
classes = 8

[pretrain]
epochs = 1
batch_size = 8

[blend]
candidate_pool_size = 6

[analysis]
verification_pairs = 40
holdout_identities = 6
holdout_images_per_identity = 4
saliency_images = 2
eval_pairs = 4

[losses]
pairs = 4
"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn config_parse_error_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nonsense_key = 1\n").unwrap();
    let out = run(&["--config", bad.to_str().unwrap(), "gen-dataset", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config_parse_error"), "stderr: {stderr}");

    let out = run(&["--synth.not_real=3", "gen-dataset", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "pretrain",
        "--dataset",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("model").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing_input"), "stderr: {stderr}");
}

#[test]
fn class_mismatch_is_exit_4_and_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ds = dir.path().join("ds");
    let ok = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-dataset",
        "--out",
        ds.to_str().unwrap(),
    ]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--margin.classes=99",
        "pretrain",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        dir.path().join("model").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("invariant_violation"), "stderr: {stderr}");
    assert!(stderr.contains("margin.classes"), "stderr: {stderr}");
}

#[test]
fn overrides_land_in_manifest_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ds = dir.path().join("ds");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--synth.rho=0.25",
        "gen-dataset",
        "--out",
        ds.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(ds.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["synth"]["rho"].as_f64(), Some(0.25));
    assert_eq!(manifest["seed"].as_u64(), Some(11));
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 5);
}

#[test]
fn blend_preview_writes_pixmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ds = dir.path().join("ds");
    assert!(run(&["--config", cfg.to_str().unwrap(), "gen-dataset", "--out", ds.to_str().unwrap()])
        .status
        .success());
    let preview = dir.path().join("preview");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "blend-preview",
        "--dataset",
        ds.to_str().unwrap(),
        "--index",
        "2",
        "--out",
        preview.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["anchor.ppm", "candidate.ppm", "mask.pgm", "blended.ppm"] {
        let bytes = std::fs::read(preview.join(name)).unwrap();
        let magic: &[u8] = if name.ends_with(".pgm") { b"P5\n" } else { b"P6\n" };
        assert!(bytes.starts_with(magic), "{name} header");
    }
}

#[test]
fn repro_tiny_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("repro");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "repro",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(out_dir.join("summary.json")).unwrap())
            .unwrap();
    for key in ["gap_p0", "gap_p05", "verification_p0", "verification_p05"] {
        assert!(summary[key].is_number(), "{key} missing");
    }
    assert!(out_dir.join("model_p000/weights.f32").exists());
    assert!(out_dir.join("analysis_p050/similarities.csv").exists());
}
