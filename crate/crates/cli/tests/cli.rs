//! The `cliff` binary end to end on tiny problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cliff_core::synthdata::MixingSpec;
use cliff_core::trainer::{EncoderSpec, Params};
use serde_json::json;
use tempfile::TempDir;

fn cliff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cliff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, value: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn small_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        json!({
            "synth": { "n": 200 },
            "encoder": { "layer_dims": [2, 8, 2] },
            "train": { "epochs": 3, "batch_size": 200 }
        }),
    )
}

fn gen_small(dir: &Path) -> (PathBuf, PathBuf) {
    let config = small_config(dir);
    let data = dir.join("data.csv");
    let out = cliff(&["gen", "--config", p(&config), "--seed", "4", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (config, data)
}

#[test]
fn gen_writes_the_requested_rows() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    let out = cliff(&["gen", "--seed", "7", "--out", p(&data)]);
    assert!(out.status.success());
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("z_1,z_2,x_1,x_2"));
    assert_eq!(lines.count(), 5000);
    assert!(data.with_extension("json").exists());
}

#[test]
fn gen_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(cliff(&["gen", "--seed", "3", "--out", p(&a)]).status.success());
    assert!(cliff(&["gen", "--seed", "3", "--out", p(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(a.with_extension("json")).unwrap(),
        fs::read(b.with_extension("json")).unwrap()
    );
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), json!({ "synth": { "n": 10, "no_such_key": 1 } }));
    let data = dir.path().join("d.csv");
    let out = cliff(&["gen", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!data.exists());
    assert!(!data.with_extension("json").exists());
}

#[test]
fn train_writes_its_outputs_and_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    let (config, data) = gen_small(dir.path());
    let run = dir.path().join("run");
    let args = [
        "train",
        "--data",
        p(&data),
        "--config",
        p(&config),
        "--out",
        p(&run),
    ];
    let out = cliff(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.resolved.json",
        "initial_params.json",
        "metrics.csv",
        "params.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);

    assert_eq!(cliff(&args).status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(cliff(&forced).status.success());
}

#[test]
fn zero_learning_rate_saves_the_initial_parameters() {
    let dir = TempDir::new().unwrap();
    let (_, data) = gen_small(dir.path());
    let config = write_config(
        dir.path(),
        json!({
            "encoder": { "layer_dims": [2, 8, 2] },
            "train": { "epochs": 2, "batch_size": 200, "learning_rate": 0.0 }
        }),
    );
    let run = dir.path().join("run");
    let out = cliff(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&config),
        "--out",
        p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let initial = Params::from_json(&fs::read_to_string(run.join("initial_params.json")).unwrap()).unwrap();
    let trained = Params::from_json(&fs::read_to_string(run.join("params.json")).unwrap()).unwrap();
    assert_eq!(initial, trained);
}

#[test]
fn identity_encoder_on_monotone_mixing_scores_full_marks() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        json!({
            "synth": { "n": 2000 },
            "mixing": MixingSpec::identity(2, 0.5),
            "encoder": { "layer_dims": [2, 2] }
        }),
    );
    let data = dir.path().join("d.csv");
    assert!(cliff(&["gen", "--config", p(&config), "--out", p(&data)])
        .status
        .success());
    let mut params = Params::zeros(&EncoderSpec {
        layer_dims: vec![2, 2],
        ..EncoderSpec::default()
    })
    .unwrap();
    params.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
    let params_path = dir.path().join("params.json");
    fs::write(&params_path, params.to_json().unwrap()).unwrap();

    let out = cliff(&[
        "eval",
        "--data",
        p(&data),
        "--params",
        p(&params_path),
        "--config",
        p(&config),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mcc.json")).unwrap()).unwrap();
    assert!((report["mcc"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!(dir.path().join("thresholds.json").exists());
}

#[test]
fn corrupt_parameters_are_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (_, data) = gen_small(dir.path());
    let params = dir.path().join("params.json");
    fs::write(&params, "{ \"layers\": [ 1, 2").unwrap();
    let out = cliff(&["eval", "--data", p(&data), "--params", p(&params)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("mcc.json").exists());
    assert!(!dir.path().join("thresholds.json").exists());
}

#[test]
fn landscape_step_90_has_four_cells() {
    let dir = TempDir::new().unwrap();
    let (_, data) = gen_small(dir.path());
    let csv = dir.path().join("landscape.csv");
    let out = cliff(&["landscape", "--data", p(&data), "--step", "90", "--out", p(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("theta1_deg,theta2_deg,l_uni,l_biv,l_kl_uni,total,singular")
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn landscape_needs_two_factors() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        json!({
            "synth": { "n": 100, "threshold_counts": [2, 1, 1] },
            "encoder": { "layer_dims": [3, 8, 3] }
        }),
    );
    let data = dir.path().join("d.csv");
    assert!(cliff(&["gen", "--config", p(&config), "--out", p(&data)])
        .status
        .success());
    let csv = dir.path().join("landscape.csv");
    let out = cliff(&["landscape", "--data", p(&data), "--step", "90", "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!csv.exists());
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let ok = cliff(&["gradcheck"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));

    let broken = cliff(&["gradcheck", "--negate-backward", "gauss"]);
    assert_eq!(broken.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&broken.stderr);
    for term in ["l_uni", "l_biv", "l_kl_uni", "total"] {
        assert!(stderr.contains(term), "{stderr}");
    }
}
