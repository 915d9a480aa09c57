//! End-to-end command tests: exit codes, machine-readable output, and the
//! cache contract as seen from the operator surface.

use std::path::Path;
use std::process::{Command, Output};

fn mixmas() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mixmas"));
    // Keep the environment-variable fallback out of the way unless a test
    // sets it explicitly.
    cmd.env_remove("MIXMAS_LEDGER");
    cmd
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_synth_spec(dir: &Path, num_samples: usize) -> std::path::PathBuf {
    let spec = serde_json::json!({
        "name": "clitest",
        "seed": 11,
        "num_samples": num_samples,
        "num_classes": 4,
        "modalities": [
            { "name": "seq_a", "signal": "token_order", "tokens": 6, "width": 6 },
            { "name": "seq_b", "signal": "pooled_mean", "tokens": 4, "width": 5 }
        ],
        "noise": 0.2,
        "split": { "train": 0.7, "val": 0.1, "test": 0.2, "seed": 11 }
    });
    let path = dir.join("synth.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn write_search_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "sampling": { "z": 1.96, "p_hat": 0.5, "epsilon": 0.07, "seed": 2 },
        "train": { "lr": 0.001, "epochs": 3, "batch_size": 32, "seed": 2 },
        "width": 8,
        "depth": 1
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn gen_dataset(dir: &Path, num_samples: usize) -> std::path::PathBuf {
    let spec = write_synth_spec(dir, num_samples);
    let data_dir = dir.join("data");
    let out = mixmas()
        .args(["gen-synth", "--spec"])
        .arg(&spec)
        .arg("--out-dir")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-synth failed: {}", stderr(&out));
    data_dir.join("manifest.json")
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_synth_spec(dir.path(), 120);
    for sub in ["a", "b"] {
        let out = mixmas()
            .args(["gen-synth", "--spec"])
            .arg(&spec)
            .arg("--out-dir")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between runs");
    }
}

#[test]
fn sample_defaults_print_the_corrected_size() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 10_000);
    let plan_path = dir.path().join("plan.json");
    let out = mixmas()
        .args(["sample", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&plan_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("4900"), "expected N'=4900 in output:\n{text}");
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(plan["size"], 4900);
    assert!(plan["distance"].as_f64().unwrap() < 0.05);
}

#[test]
fn sample_rejects_zero_epsilon_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 120);
    let out = mixmas()
        .args(["sample", "--manifest"])
        .arg(&manifest)
        .args(["--epsilon", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("epsilon"), "{}", stderr(&out));
}

#[test]
fn sample_unwritable_out_path_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 120);
    let out = mixmas()
        .args(["sample", "--manifest"])
        .arg(&manifest)
        .args(["--out", "/nonexistent-dir-for-mixmas-test/plan.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn search_then_warm_rerun_reports_zero_trainings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 240);
    let config = write_search_config(dir.path());
    let ledger = dir.path().join("ledger.jsonl");
    let arch = dir.path().join("arch.json");

    let run = |arch_out: &Path| {
        mixmas()
            .args(["search", "--manifest"])
            .arg(&manifest)
            .arg("--config")
            .arg(&config)
            .arg("--ledger")
            .arg(&ledger)
            .arg("--out")
            .arg(arch_out)
            .output()
            .unwrap()
    };

    let cold = run(&arch);
    assert!(cold.status.success(), "{}", stderr(&cold));
    let cold_text = stdout(&cold);
    assert!(cold_text.contains('*'), "winner marker missing:\n{cold_text}");
    assert!(!cold_text.contains("\n0 trainings"), "cold run must train:\n{cold_text}");

    let arch2 = dir.path().join("arch2.json");
    let warm = run(&arch2);
    assert!(warm.status.success(), "{}", stderr(&warm));
    assert!(stdout(&warm).contains("0 trainings"), "warm run output:\n{}", stdout(&warm));
    assert_eq!(
        std::fs::read(&arch).unwrap(),
        std::fs::read(&arch2).unwrap(),
        "architecture files differ between identical runs"
    );
}

#[test]
fn search_missing_config_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 120);
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{ "sampling": { "z": 1.96, "p_hat": 0.5, "epsilon": 0.05, "seed": 1 } }"#)
        .unwrap();
    let out = mixmas()
        .args(["search", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .args(["--ledger", "/tmp/unused-ledger.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("train"), "missing key not named: {}", stderr(&out));
}

#[test]
fn search_requires_a_ledger_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 120);
    let config = write_search_config(dir.path());
    let out = mixmas()
        .args(["search", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("MIXMAS_LEDGER"));
}

#[test]
fn train_json_reports_scores_and_validates_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 240);
    let config = write_search_config(dir.path());
    let ledger = dir.path().join("ledger.jsonl");
    let arch = dir.path().join("arch.json");
    let out = mixmas()
        .args(["search", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--ledger")
        .arg(&ledger)
        .arg("--out")
        .arg(&arch)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    // Zero-epoch training evaluates the initialized model: near chance.
    let out = mixmas()
        .args(["train", "--manifest"])
        .arg(&manifest)
        .arg("--arch")
        .arg(&arch)
        .args(["--epochs", "0", "--json"])
        .arg("--ledger")
        .arg(&ledger)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let score = doc["score"].as_f64().unwrap();
    assert!((score - 0.25).abs() <= 0.12, "zero-epoch score {score} far from chance");

    // Dangling provenance key -> validation failure.
    let mut spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&arch).unwrap()).unwrap();
    spec["provenance"]["fusion_function"] = serde_json::json!("deadbeef");
    let bad_arch = dir.path().join("bad_arch.json");
    std::fs::write(&bad_arch, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let out = mixmas()
        .args(["train", "--manifest"])
        .arg(&manifest)
        .arg("--arch")
        .arg(&bad_arch)
        .arg("--ledger")
        .arg(&ledger)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("deadbeef"));
}

#[test]
fn report_handles_empty_and_grouped_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    let out = mixmas().args(["report", "--ledger"]).arg(&empty).output().unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("0 records"));

    // Populate via a small search, then check grouping and the JSON view.
    let manifest = gen_dataset(dir.path(), 240);
    let config = write_search_config(dir.path());
    let ledger = dir.path().join("ledger.jsonl");
    let out = mixmas()
        .args(["search", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--ledger")
        .arg(&ledger)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let out = mixmas().args(["report", "--ledger"]).arg(&ledger).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("encoder:seq_a"));
    assert!(text.contains("fusion_function"));

    let out = mixmas().args(["report", "--json", "--ledger"]).arg(&ledger).output().unwrap();
    assert!(out.status.success());
    let records: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(records.as_array().unwrap().len() >= 5);
}

#[test]
fn ledger_env_var_is_the_default_path() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("env-ledger.jsonl");
    std::fs::write(&ledger, "").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mixmas"))
        .env("MIXMAS_LEDGER", &ledger)
        .arg("report")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("0 records"));
}

#[test]
fn search_json_output_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 240);
    let config = write_search_config(dir.path());
    let ledger = dir.path().join("ledger.jsonl");
    let out = mixmas()
        .args(["search", "--json", "--manifest"])
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--ledger")
        .arg(&ledger)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["spec"]["format_version"], 1);
    assert!(doc["stages"].as_array().unwrap().len() >= 3);
    assert!(doc["counters"]["trainings"].as_u64().unwrap() > 0);
}
