use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use narrowkit::cli::csv_header;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_narrowkit"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn round_trivial_instance_has_discrepancy_half() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed": 0, "rounding": {"vectors": [[1.0]], "lambdas": [0.5], "norm": {"kind": "sup"}}}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["round", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("round.json"));
    assert_eq!(report["half"]["discrepancy"], 0.5);
    assert_eq!(report["half"]["certificate"], 0.5);
}

#[test]
fn example_l1_strict_narrow_certifies_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["example-l1", "--levels", "8", "--check", "strict-narrow", "--seed", "1"],
    );
    assert_eq!(out.status.code(), Some(0));
    let report = read_json(&dir.path().join("example-l1.json"));
    assert_eq!(report["strict_narrow"]["all_zero"], true);
    let levels = report["per_level"].as_array().unwrap();
    assert_eq!(levels.len(), 8);
    assert!(levels.iter().all(|l| l["zero_sign_norm"] == 0.0));
    assert!(report["tail"].is_null());
}

#[test]
fn missing_seed_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["round"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert_eq!(
        run(dir.path(), &["round", "--seed", "1", "--format", "xml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(dir.path(), &["frobnicate", "--seed", "1"]).status.code(), Some(1));
}

#[test]
fn config_with_missing_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 3, "operator": {"file": "nowhere.csv"}}"#).unwrap();
    let out = run(dir.path(), &["partition", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn certified_failure_exits_two_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed": 5,
            "t1": {"kind": "random_narrow", "atoms": 8, "target_dim": 2, "decay": 0.5},
            "t2": {"kind": "random_narrow", "target_dim": 2, "decay": 0.5, "norm": {"kind": "lp", "p": 0.5}}}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["sum-compact", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let failure = read_json(&dir.path().join("sum-compact.failure.json"));
    assert_eq!(failure["status"], "certified_failure");
    let meta = read_json(&dir.path().join("run_meta.json"));
    assert_eq!(meta["status"], "certified_failure");
    assert!(!dir.path().join("sum-compact.json").exists());
}

#[test]
fn pairing_precondition_failure_carries_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["pairing", "--seed", "2", "--delta", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let failure = read_json(&dir.path().join("pairing.failure.json"));
    assert!(!failure["detail"]["witness"].as_array().unwrap().is_empty());
}

#[test]
fn matrix_csv_operator_from_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "rows,cols\n1,4\n1,1,-1,-1\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed": 9, "operator": {"file": "m.csv", "norm": {"kind": "lp", "p": 1.0}}}"#,
    )
    .unwrap();
    let out = run(
        dir.path(),
        &["find-sign", "--config", cfg.to_str().unwrap(), "--epsilon", "0.01"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("find-sign.json"));
    assert_eq!(report["norm"], 0.0);
    assert_eq!(report["mean_zero"], true);
}

#[test]
fn csv_headers_match_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    for (name, extra) in [
        ("round", &[][..]),
        ("partition", &[][..]),
        ("find-sign", &[][..]),
        ("sum-finite-rank", &[][..]),
        ("example-l1", &["--levels", "4"][..]),
        ("example-condexp", &[][..]),
        ("bench", &["--instances", "3"][..]),
    ] {
        let sub = dir.path().join(name);
        let mut args = vec![name, "--seed", "4", "--format", "csv"];
        args.extend_from_slice(extra);
        let out = run(&sub, &args);
        assert_eq!(out.status.code(), Some(0), "{name}");
        assert!(!sub.join(format!("{name}.json")).exists());
        let text = fs::read_to_string(sub.join(format!("{name}.csv"))).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, csv_header(name).unwrap().join(","), "{name}");
    }
}

#[test]
fn seed_changes_random_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&a, &["round", "--seed", "1"]);
    run(&b, &["round", "--seed", "2"]);
    assert_ne!(
        fs::read(a.join("round.json")).unwrap(),
        fs::read(b.join("round.json")).unwrap()
    );
}
