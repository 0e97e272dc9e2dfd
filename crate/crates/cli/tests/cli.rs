//! End-to-end runs of the `ordalign` binary on a smoke-scale config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ordalign")
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let text = format!(
        r#"
seed = 5
out_dir = "{}"

[rvegen]
count = 24
image_size = 32
noise = false

[encoders]
d = 16
model_dim = 32
heads = 4
vision_layers = 1
tabular_layers = 1
patch_size = 8
lora_rank = 4
lora_alpha = 8.0
base_epochs = 1
aux_count = 16

[trainer]
epochs = 2
batch_size = 8
mode = "order_dyn"

[downstream]
predictor_epochs = 3

[diffgen]
timesteps = 20
gen_size = 16
prior_epochs = 2
decoder_epochs = 2
prior_hidden = 32
decoder_hidden = 32
"#,
        out.display()
    );
    let path = dir.join("smoke.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_pretrain_retrieve_pipeline_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());

    let g = run(&cfg, &["gen-data"]);
    assert!(g.status.success(), "gen-data: {}", String::from_utf8_lossy(&g.stderr));
    assert!(dir.path().join("run/data/manifest.csv").exists());
    assert!(dir.path().join("run/data/files.txt").exists());
    assert!(dir.path().join("run/config_resolved.toml").exists());

    let p = run(&cfg, &["pretrain"]);
    assert!(p.status.success(), "pretrain: {}", String::from_utf8_lossy(&p.stderr));
    assert!(dir.path().join("run/pretrain/checkpoint_final.bin").exists());
    assert!(dir.path().join("run/pretrain/checkpoint_best.bin").exists());
    assert!(dir.path().join("run/pretrain/training_log.csv").exists());
    assert!(dir.path().join("run/split.csv").exists());

    let r = run(&cfg, &["retrieve", "--k", "1", "--k", "5"]);
    assert!(r.status.success(), "retrieve: {}", String::from_utf8_lossy(&r.stderr));
    let metrics = fs::read_to_string(dir.path().join("run/retrieve/metrics.csv")).unwrap();
    assert!(metrics.contains("top1_accuracy"));
    assert!(metrics.contains("top5_accuracy"));
    assert!(metrics.contains("top5_deviation_yield_strength"));

    let e = run(&cfg, &["eval"]);
    assert!(e.status.success(), "eval: {}", String::from_utf8_lossy(&e.stderr));
    assert!(dir.path().join("run/eval/similarity_elongation.csv").exists());
    assert!(dir.path().join("run/eval/projection.csv").exists());

    let gen = run(
        &cfg,
        &["generate", "--id", "0", "--per-descriptor", "1"],
    );
    assert!(gen.status.success(), "generate: {}", String::from_utf8_lossy(&gen.stderr));
    let gcsv = fs::read_to_string(dir.path().join("run/generate/generations.csv")).unwrap();
    assert!(gcsv.lines().count() >= 2);
    assert!(dir.path().join("run/generate/gen_0000.pgm").exists());
}

#[test]
fn invalid_config_key_gives_nonzero_exit_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[trainer]\nlearning_rate_typo = 1.0\n").unwrap();
    let out = run(&path, &["gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stderr: {err}");
    assert!(err.contains("learning_rate_typo"), "stderr: {err}");
}

#[test]
fn missing_artifact_is_reported_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = run(&cfg, &["retrieve"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stderr: {err}");
}

#[test]
fn rerunning_gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    assert!(run(&cfg, &["gen-data"]).status.success());
    let manifest = dir.path().join("run/data/manifest.csv");
    let image = dir.path().join("run/data/images/00001.pgm");
    let m1 = fs::read(&manifest).unwrap();
    let i1 = fs::read(&image).unwrap();
    assert!(run(&cfg, &["gen-data"]).status.success());
    assert_eq!(m1, fs::read(&manifest).unwrap());
    assert_eq!(i1, fs::read(&image).unwrap());
}
