// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[corpus]
n_persons = 12
n_conflicted = 4

[model]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
max_seq_len = 96

[train.base]
epochs = 1

[train.mix]
epochs = 1

[train.clean]
epochs = 1

[probe]
component = "both"
ts = "both"
"#;

fn probe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conflict-probe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn stage_without_inputs_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = probe(&["patch", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[MISSING_ARTIFACT]"), "{}", stderr(&o));
}

#[test]
fn bad_overrides_are_config_errors() {
    let o = probe(&["config", "--layers", "3..99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("INVALID_CONFIG"), "{}", stderr(&o));
    let o = probe(&["config", "--component", "head"]);
    assert!(stderr(&o).contains("INVALID_CONFIG"), "{}", stderr(&o));
    let o = probe(&["config", "--config", "/nonexistent/c.toml"]);
    assert!(stderr(&o).contains("MISSING_ARTIFACT"), "{}", stderr(&o));
}

#[test]
fn printed_config_reflects_overrides_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let o = probe(&["config", "--seed", "9", "--layers", "5..8", "--ts", "both", "--bins", "derived"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("layers = \"5..8\""));
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    let again = probe(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn tiny_pipeline_runs_stage_by_stage_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for stage in ["gen-corpus", "train", "lens", "patch", "cmap", "report"] {
        let o = probe(&["--config", &config, "--out", out, stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let report = Path::new(out).join("report");
    for f in ["contributions.csv", "outcomes.csv", "bins.csv", "steering.csv", "impact.csv", "confidence.csv", "run_manifest.json"] {
        assert!(report.join(f).is_file(), "{f} missing");
    }

    let v = probe(&["--config", &config, "--out", out, "verify"]);
    let text = String::from_utf8(v.stdout).unwrap();
    for check in ["manifests", "fixed_bins", "residual_algebra", "telescoping", "self_patch", "cmap_degeneracy", "report_bundle"] {
        assert!(text.contains(&format!("PASS {check}:")), "{check} did not pass:\n{text}");
    }
    // One epoch per phase cannot memorize anything, so verify must report it.
    assert!(text.contains("FAIL memorization:"), "{text}");
    assert_eq!(v.status.code(), Some(1));

    let corpus = Path::new(out).join("corpus").join("clean.jsonl");
    let mut bytes = std::fs::read(&corpus).unwrap();
    bytes.push(b'\n');
    std::fs::write(&corpus, bytes).unwrap();
    let o = probe(&["--config", &config, "--out", out, "lens"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[STALE_ARTIFACT]"), "{}", stderr(&o));
}
