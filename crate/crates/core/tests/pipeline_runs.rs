use std::fs;
use std::path::Path;
use std::process::Command;

use ctrecon::pipeline::{self, paths, run_experiment, sha256_hex, ExperimentConfig, SynthConfig};

fn config(out: &Path, methods: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 11,
        out_dir: out.to_path_buf(),
        methods: methods.iter().map(|m| m.to_string()).collect(),
        ..ExperimentConfig::default()
    };
    cfg.data.synth = Some(SynthConfig::default());
    cfg.spans.train_days = Some(30);
    cfg.spans.validation_days = 15;
    cfg
}

fn all_methods() -> Vec<&'static str> {
    pipeline::PipelineMethod::ALL.iter().map(|m| m.as_str()).collect()
}

#[test]
fn full_run_writes_the_artifact_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let start = std::time::Instant::now();
    let summary = run_experiment(&config(&out, &all_methods())).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    for rel in paths::METRICS
        .iter()
        .copied()
        .chain([paths::CONFIG, paths::MANIFEST, paths::ACTUALS])
    {
        assert!(out.join(rel).is_file(), "missing {rel}");
    }
    for rel in [
        paths::base("naive"),
        paths::base("linreg"),
        paths::reconciled("linreg"),
        paths::errors("linreg", "validation"),
    ] {
        assert!(out.join(&rel).is_file(), "missing {rel}");
    }
    // 1 benchmark + base + 7 reconciliation methods
    assert_eq!(summary.accuracy.approaches.len(), 9);
    assert!(summary.diagnostics.iter().all(|d| d.max_coherence_residual < 1e-6));
    // no staging directory left behind
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn base_only_run_skips_reconciliation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    let summary = run_experiment(&config(&out, &["base"])).unwrap();
    assert_eq!(
        summary.accuracy.approaches,
        vec!["naive".to_string(), "linreg_base".to_string()]
    );
    assert!(!out.join(paths::reconciled("linreg")).exists());
    assert!(out.join(paths::ACCURACY).is_file());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&config(&a, &all_methods())).unwrap();
    run_experiment(&config(&b, &all_methods())).unwrap();
    for rel in paths::METRICS {
        assert_eq!(
            fs::read(a.join(rel)).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn manifest_hash_matches_written_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let cfg = config(&out, &["base", "ct_wlsv"]);
    let summary = run_experiment(&cfg).unwrap();
    let text = fs::read_to_string(out.join(paths::CONFIG)).unwrap();
    assert_eq!(sha256_hex(text.as_bytes()), summary.config_sha256);
    let reparsed = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(reparsed, cfg);
    assert_eq!(reparsed.hash().unwrap(), summary.config_sha256);
    let manifest: toml::Table = fs::read_to_string(out.join(paths::MANIFEST)).unwrap().parse().unwrap();
    assert_eq!(manifest["config_sha256"].as_str(), Some(summary.config_sha256.as_str()));
}

#[test]
fn staged_commands_reproduce_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let methods = ["base", "pbu", "ct_bdshr", "ite"];
    run_experiment(&config(&full, &methods)).unwrap();
    let cfg = config(&staged, &methods);
    pipeline::forecast_stage(&cfg).unwrap();
    pipeline::reconcile_stage(&cfg).unwrap();
    pipeline::evaluate_stage(&cfg).unwrap();
    for rel in [paths::ACCURACY, paths::MSE, paths::DECISION] {
        assert_eq!(
            fs::read(full.join(rel)).unwrap(),
            fs::read(staged.join(rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn cli_reports_stage_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "methods = [\"nope\"]\n[data.synth]\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ctrecon"))
        .args(["run", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config"), "{err}");
}

#[test]
fn cli_synth_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    let synth = Command::new(env!("CARGO_BIN_EXE_ctrecon"))
        .args(["synth", "--days", "40", "--seed", "3", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(synth.status.success());
    let cfg_path = dir.path().join("exp.toml");
    fs::write(
        &cfg_path,
        "methods = [\"base\", \"ct_str\"]\n[data]\npath = \"panel.csv\"\n[spans]\ntrain_days = 25\nvalidation_days = 5\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = Command::new(env!("CARGO_BIN_EXE_ctrecon"))
        .args(["run", "--errors", "in-sample", "--hierarchy", "decision", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let acc = fs::read_to_string(out.join(paths::ACCURACY)).unwrap();
    assert!(acc.starts_with("approach,60,30,20,10,All"), "{acc}");
    assert!(out.join(paths::errors("linreg", "in_sample")).is_file());
}
