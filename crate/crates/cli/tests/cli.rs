use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
noise_sigmas = [10.0]
labeled_counts = [2]
alphas = [0.5]
repeats = 1
base_seed = 3

[dataset]
patch_size = 32
train_ratio = 0.75

[dataset.data]
source = "synthetic"
train_images = 8
test_images = 2
side = 32
min_objects = 1
max_objects = 3
intensity_scale = 100.0

[train]
epochs = 1
batch_size = 4
augmentation = "none"

[network]
depth = 1
initial_features = 4
"#;

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_denoiseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "denoiseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_config_parses_back() {
    let out = run(&["default-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let config = denoiseg::experiments::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(config, denoiseg::experiments::ExperimentConfig::default());
}

#[test]
fn train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let run_dir = dir.path().join("run");
    run(&["train", "--config", s(&config), "--out", s(&run_dir)]);
    for f in ["config.toml", "model.dnsg", "history.csv", "result.csv"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let model = run_dir.join("model.dnsg");

    let data = dir.path().join("data.dnsg");
    let rasters = dir.path().join("rasters");
    run(&[
        "make-synthetic",
        "--out",
        s(&data),
        "--count",
        "2",
        "--side",
        "40",
        "--min-objects",
        "1",
        "--max-objects",
        "3",
        "--intensity-scale",
        "100",
        "--sigma",
        "10",
        "--raster-dir",
        s(&rasters),
    ]);
    assert!(data.exists());

    let predictions = dir.path().join("pred");
    run(&[
        "predict",
        "--model",
        s(&model),
        "--input",
        s(&rasters.join("images")),
        "--out",
        s(&predictions),
    ]);
    let labels = denoiseg::storage::read_label_raster(predictions.join("blobs00000_labels.png")).unwrap();
    let denoised = denoiseg::storage::read_raster(predictions.join("blobs00000_denoised.tif")).unwrap();
    // 40 is not a multiple of the network stride; outputs keep the input size
    assert_eq!(labels.dim(), (40, 40));
    assert_eq!(denoised.dim(), (40, 40));

    let csv_path = dir.path().join("eval.csv");
    run(&[
        "evaluate",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--csv",
        s(&csv_path),
    ]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("image,ap,seg,psnr"));
    assert!(csv.lines().count() >= 3);
    run(&[
        "evaluate",
        "--model",
        s(&model),
        "--images",
        s(&rasters.join("images")),
        "--labels",
        s(&rasters.join("labels")),
    ]);
}

#[test]
fn sweep_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("sweep");
    run(&["sweep", "--config", s(&config), "--out", s(&out)]);
    for f in [
        "config.toml",
        "raw.csv",
        "aggregate.csv",
        "ap.svg",
        "seg.svg",
        "psnr.svg",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let table =
        denoiseg::experiments::ResultTable::from_csv(&std::fs::read_to_string(out.join("raw.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 1);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "repeats = \"many\"").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_denoiseg"))
        .args(["sweep", "--config", s(&config), "--out", s(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));

    let out = Command::new(env!("CARGO_BIN_EXE_denoiseg"))
        .args([
            "predict",
            "--model",
            s(&dir.path().join("none.dnsg")),
            "--input",
            "x",
            "--out",
            "y",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
