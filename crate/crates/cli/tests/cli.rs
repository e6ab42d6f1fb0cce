//! End-to-end tests of the command-line interface on small configurations.

use std::path::Path;
use std::process::Command;

fn cbds() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbds"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "dataset": {"n": 240},
  "triplets": {"n": 1200, "val_n": 150, "test_n": 200},
  "model": {"hidden_dims": [16], "embed_dim": 12},
  "train": {"epochs": 2},
  "sweep": {"trials": 1},
  "oracle": {"weight_settings": [[0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]]}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_data_writes_csv_with_expected_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cbds()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "id,head,body,tail,texture,label,split"
    );
    assert_eq!(text.lines().count(), 2 + 240);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lambda_hc": 3.0}}"#).unwrap();
    let out = cbds()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = cbds()
        .args(["gen-data", "--weights", "0,0,0,0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cbds()
        .args(["train", "--model", "hc", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let model = dir.path().join("model_hc_0.json");
    assert!(model.exists());
    let history = std::fs::read_to_string(dir.path().join("history_hc_0.csv")).unwrap();
    assert!(history.starts_with("epoch,train_ce,train_tml,train_total,val_ce,val_tml,val_total"));
    assert_eq!(history.lines().count(), 1 + 3); // header + epochs 0..=2

    let out = cbds()
        .args(["eval", "--name", "hc", "--model"])
        .arg(&model)
        .args(["--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report_hc.json")).unwrap())
            .unwrap();
    for key in [
        "classification_acc",
        "triplet_acc",
        "ni_h2h",
        "no_h2h",
        "neutral_ds",
        "persuasive_ds",
        "riro_ds",
    ] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} out of range: {v}");
    }
}

#[test]
fn gen_triplets_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for variant in ["human", "human_filtered", "label_derived", "intra_class"] {
        let out = cbds()
            .args(["gen-triplets", "--variant", variant, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "variant {variant}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text =
            std::fs::read_to_string(dir.path().join(format!("triplets_{variant}.csv"))).unwrap();
        assert!(text.starts_with(&format!("# variant={variant} ")));
    }
}

#[test]
fn run_single_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for sub in ["a", "b"] {
        let out = cbds()
            .args(["run-single", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["mle", "tml", "hc"] {
        let a = std::fs::read(dir.path().join(format!("a/reports/report_{name}_0.json"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b/reports/report_{name}_0.json"))).unwrap();
        assert_eq!(a, b, "report for {name} differs between invocations");
    }
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("explode.json");
    std::fs::write(
        &cfg,
        r#"{
  "dataset": {"n": 240},
  "triplets": {"n": 600, "val_n": 100, "test_n": 100},
  "model": {"hidden_dims": [16], "embed_dim": 8,
            "activation": "relu", "projection_activation": "relu"},
  "train": {"epochs": 2, "lr": 1e150},
  "sweep": {"trials": 1}
}"#,
    )
    .unwrap();
    let out = cbds()
        .args(["train", "--model", "hc", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn align_hist_emits_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"dataset": {"n": 150}, "align_exponent_max": 0}"#).unwrap();
    let out = cbds()
        .args(["align-hist", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("alignment_histogram.csv")).unwrap();
    assert_eq!(text.lines().count(), 16);
}
