use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phiflow_cli::error::{EXIT_INVALID_CONFIG, EXIT_USAGE};
use phiflow_cli::{registry, ExperimentConfig, REGISTRY};

fn phiflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phiflow")).args(args).output().expect("binary runs")
}

fn run_dirs(root: &Path, id: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root.join(id)).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn list_prints_every_id_once() {
    let out = phiflow(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for info in REGISTRY {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(info.id)).count(), 1, "{}", info.id);
    }
}

#[test]
fn every_default_round_trips_through_validation() {
    for info in REGISTRY {
        let cfg = registry::defaults(info.id).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        back.validate().unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn empty_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.toml");
    fs::write(&empty, "").unwrap();
    let out = phiflow(&["run", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
    assert_eq!(phiflow(&["run", ""]).status.code(), Some(EXIT_USAGE));
    assert_eq!(phiflow(&[]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn invalid_config_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    let text = "[experiment]\nid = \"plap-decay\"\n[nonlinearity]\nids = [\"p-laplace:1.5\", \"nope\"]\n[params]\nbeta = 1.5\n[noise]\nrule = \"poly:0.5\"\n";
    fs::write(&path, text).unwrap();
    let out = phiflow(&["run", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_INVALID_CONFIG));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid-config");
    let v: Vec<String> = err["violations"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
    assert_eq!(v.len(), 3, "{v:?}");
    assert!(v.iter().any(|m| m.contains("nope")));
    assert!(v.iter().any(|m| m.contains("beta*")));
    assert!(v.iter().any(|m| m.contains("(B1)")));
    assert!(!tmp.path().join("plap-decay").exists());
}

#[test]
fn check_assumptions_reports_json() {
    let out = phiflow(&["check-assumptions", "arctan"]);
    assert!(out.status.success());
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["spec_id"], "arctan");
    assert_eq!(rep["verdicts"]["C7"]["status"], "pass");
    let out = phiflow(&["check-assumptions", "p-laplace:3"]);
    assert!(!out.status.success());
    let out = phiflow(&["check-assumptions", "unknown"]);
    assert_eq!(out.status.code(), Some(EXIT_INVALID_CONFIG));
}

#[test]
fn run_writes_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    for _ in 0..2 {
        let out = phiflow(&["run", "exponent-table", "--out", root]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("sum b_k^2 lambda_k"));
    }
    let dirs = run_dirs(tmp.path(), "exponent-table");
    assert_eq!(dirs.len(), 2);
    for name in ["summary.csv", "results.jsonl", "verdicts.jsonl", "provenance.json", "metadata.json", "config.toml"] {
        assert!(dirs[0].join(name).is_file(), "{name}");
    }
    let a = fs::read(dirs[0].join("summary.csv")).unwrap();
    assert_eq!(a, fs::read(dirs[1].join("summary.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("nonlinearity,d,s,s_star"));
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(dirs[0].join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(prov["seed"], 42);
    for line in fs::read_to_string(dirs[0].join("verdicts.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true);
        assert_eq!(v["criterion"], 1);
    }
}

#[test]
fn seed_override_changes_random_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    for seed in ["1", "2"] {
        assert!(phiflow(&["run", "second-order-1d", "--seed", seed, "--out", root]).status.success());
    }
    let dirs = run_dirs(tmp.path(), "second-order-1d");
    let read = |d: &Path| fs::read_to_string(d.join("summary.csv")).unwrap();
    assert_ne!(read(&dirs[0]), read(&dirs[1]));
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(dirs[1].join("provenance.json")).unwrap()).unwrap();
    assert!(prov["seed"] == 1 || prov["seed"] == 2);
}

#[test]
fn config_file_overlays_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, format!("[experiment]\nid = \"yosida\"\n[nonlinearity]\nids = [\"arctan\"]\n[params]\nsamples = 5\n[output]\ndir = {:?}\n", tmp.path())).unwrap();
    let out = phiflow(&["run", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dirs = run_dirs(tmp.path(), "yosida");
    let summary = fs::read_to_string(dirs[0].join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.contains("arctan,resolvent nonexpansive,5,"));
}
