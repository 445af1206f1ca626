use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CS2: &str = "mov ecx, edx\nxor edx, edx\nlea rax, [rcx + rax - 1]\ndiv rcx\nmov rdx, rcx\nimul rax, rcx\n";

fn comet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comet")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = comet(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cs2.s"), CS2).unwrap();
    let small: String = comet_core::data::FIXTURES.lines().step_by(18).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("small.jsonl"), small).unwrap();
    let p = dir.path().to_path_buf();
    (dir, p)
}

fn script(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path.display().to_string()
}

#[test]
fn explain_case_study_two() {
    let (_t, dir) = setup();
    let out = ok(&dir, &["explain", "--block", "cs2.s", "--seed", "3"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["config"]["explain"]["master_seed"], 3);
    assert_eq!(v["ground_truth"], serde_json::json!(["dep:4-6:raw:rax"]));
    assert_eq!(v["explanation"]["prediction"], 22.0);
    assert!(v["explanation"].get("wall_time").is_none());
    assert_eq!(out, ok(&dir, &["explain", "--block", "cs2.s", "--seed", "3"]));
    let timed: serde_json::Value = serde_json::from_str(&ok(&dir, &["--timing", "explain", "--block", "cs2.s"])).unwrap();
    assert!(timed["explanation"]["wall_time"].as_f64().unwrap() > 0.0);
}

#[test]
fn explain_with_constant_external_model() {
    let (_t, dir) = setup();
    let mock = script(&dir, "mock.sh", "cat >/dev/null\necho 2.0");
    let v: serde_json::Value =
        serde_json::from_str(&ok(&dir, &["explain", "--block", "cs2.s", "--model", &format!("exec:{mock}")])).unwrap();
    // Every perturbation predicts 2.0, so any single feature is fully precise.
    assert_eq!(v["explanation"]["prediction"], 2.0);
    assert_eq!(v["explanation"]["est_precision"], 1.0);
    assert_eq!(v["features"].as_array().unwrap().len(), 1);
    assert_eq!(v["config"]["explain"]["epsilon"], 0.5);
    assert!(v.get("ground_truth").is_none());
}

#[test]
fn exit_codes() {
    let (_t, dir) = setup();
    let code = |args: &[&str]| comet(&dir, args).status.code().unwrap();
    assert_eq!(code(&["--kb", "missing.json", "graph", "--block", "cs2.s"]), 2);
    assert_eq!(code(&["graph"]), 2);
    assert_eq!(code(&["explain", "--block", "cs2.s", "--model", "uica"]), 2);
    assert_eq!(code(&["explain", "--block", "cs2.s", "--march", "zen9"]), 2);
    assert_eq!(code(&["graph", "--asm", "frobnicate rax"]), 3);
    assert_eq!(code(&["perturb", "--block", "cs2.s", "--preserve", "inst:9"]), 3);
    assert_eq!(code(&["perturb", "--block", "cs2.s", "--preserve", "dep:1-2"]), 3);
    let broken = script(&dir, "broken.sh", "exit 1");
    assert_eq!(code(&["explain", "--block", "cs2.s", "--model", &format!("exec:{broken}")]), 4);
    assert_eq!(code(&["explain", "--asm", "mov rax, rbx\\nadd rax, 1", "--threshold", "0.999999"]), 5);
    let out = dir.join("mape");
    assert_eq!(code(&["eval", "mape", "--dataset", "small.jsonl", "--out-dir", out.to_str().unwrap()]), 3);
}

#[test]
fn config_file_overrides_defaults() {
    let (_t, dir) = setup();
    std::fs::write(dir.join("c.toml"), "[explain]\nbeam_width = 2\n").unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&ok(&dir, &["--config", "c.toml", "explain", "--block", "cs2.s"])).unwrap();
    assert_eq!(v["config"]["explain"]["beam_width"], 2);
    assert_eq!(v["config"]["explain"]["lucb_tolerance"], 0.1);
    std::fs::write(dir.join("bad.toml"), "[explain]\nbeam = 2\n").unwrap();
    assert_eq!(comet(&dir, &["--config", "bad.toml", "graph", "--block", "cs2.s"]).status.code(), Some(2));
}

#[test]
fn graph_contains_case_study_edge() {
    let (_t, dir) = setup();
    let v: serde_json::Value = serde_json::from_str(&ok(&dir, &["graph", "--block", "cs2.s"])).unwrap();
    let edges = v["graph"]["dep_edges"].as_array().unwrap();
    assert!(edges.iter().any(|e| e["src"] == 3 && e["dst"] == 6 && e["kind"] == "raw" && e["resource"] == "rax"));
    let near: serde_json::Value = serde_json::from_str(&ok(&dir, &["graph", "--block", "cs2.s", "--nearest"])).unwrap();
    assert!(near["graph"]["dep_edges"].as_array().unwrap().len() < edges.len());
}

#[test]
fn perturb_is_reproducible_and_preserves() {
    let (_t, dir) = setup();
    let args = ["perturb", "--block", "cs2.s", "--preserve", "inst:4", "-n", "3", "--seed", "7"];
    let a = ok(&dir, &args);
    assert_eq!(a, ok(&dir, &args));
    assert!(a.starts_with("; seed 7 preserve [inst:4]\n"));
    let blocks: Vec<&str> = a.split("\n\n").collect();
    assert_eq!(blocks.len(), 3);
    for b in blocks {
        assert!(b.lines().any(|l| l.starts_with("div ")), "{b}");
    }
    let other = ok(&dir, &["perturb", "--block", "cs2.s", "--preserve", "inst:4", "-n", "3", "--seed", "8"]);
    assert_ne!(a, other);
    let v: serde_json::Value = serde_json::from_str(&ok(&dir, &[&args[..], &["--json"]].concat())).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn space_size_of_vdivss_block() {
    let (_t, dir) = setup();
    std::fs::write(dir.join("v.s"), comet_core::fixtures::VDIVSS_BLOCK).unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&dir, &["space-size", "--block", "v.s", "--json"])).unwrap();
    let log10 = v["log10_count"].as_f64().unwrap();
    assert!((25.0..=45.0).contains(&log10), "{log10}");
    let text = ok(&dir, &["space-size", "--block", "v.s"]);
    assert!(text.starts_with("log10 ") && text.contains("x10^"));
}

#[test]
fn eval_commands_write_reports() {
    let (_t, dir) = setup();
    let out = dir.join("out");
    let o = out.to_str().unwrap();
    let line = ok(&dir, &["eval", "accuracy", "--dataset", "small.jsonl", "--seeds", "2", "--out-dir", o]);
    assert!(line.lines().next().unwrap().starts_with("comet: accuracy "), "{line}");
    for f in ["accuracy.json", "accuracy_comet.csv", "accuracy_random.csv", "accuracy_fixed.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("accuracy.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["reports"]["comet"]["rows"].as_array().unwrap().len(), 6);

    let table = ok(&dir, &["eval", "prominence", "--report", out.join("accuracy.json").to_str().unwrap(), "--out-dir", o]);
    assert!(table.starts_with("group"));
    assert_eq!(std::fs::read_to_string(out.join("prominence.csv")).unwrap().lines().count(), 4);

    let counter = script(&dir, "count.sh", "awk 'END { print 0.25 * NR }'");
    ok(&dir, &["eval", "preccov", "--dataset", "small.jsonl", "--seeds", "1", "--model", &format!("exec:{counter}"), "--out-dir", o]);
    assert!(std::fs::read_to_string(out.join("preccov.csv")).unwrap().starts_with("id,seed,correct,precision"));

    let m = ok(&dir, &["eval", "mape", "--dataset", "bundled:casestudies", "--out-dir", o]);
    assert!(m.contains("mape 40.54%"), "{m}");
}

#[test]
fn fixtures_match_bundled_file() {
    let (_t, dir) = setup();
    assert_eq!(ok(&dir, &["fixtures"]), comet_core::data::FIXTURES);
}
