//! Pins the shape of every JSON report: key paths and value kinds, with
//! arrays collapsed to their first element. Set `UPDATE_GOLDEN=1` to rewrite.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn shape(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    out.insert(prefix.to_string(), kind(v).to_string());
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                shape(&format!("{prefix}.{k}"), x, out);
            }
        }
        Value::Array(items) => {
            if let Some(first) = items.first() {
                shape(&format!("{prefix}[]"), first, out);
            }
        }
        _ => {}
    }
}

#[test]
fn report_schemas_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let runs: &[(&str, &[&str])] = &[
        ("round", &[]),
        ("partition", &[]),
        ("find-sign", &[]),
        ("pairing", &[]),
        ("sum-finite-rank", &[]),
        ("sum-compact", &[]),
        ("example-l1", &["--levels", "6"]),
        ("example-condexp", &[]),
        ("bench", &["--instances", "5"]),
    ];
    let mut all = BTreeMap::new();
    for (name, extra) in runs {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_narrowkit"))
            .arg(name)
            .args(*extra)
            .args(["--seed", "21", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{name}");
        for file in [format!("{name}.json"), "run_meta.json".to_string()] {
            let v: Value = serde_json::from_str(&fs::read_to_string(out.join(&file)).unwrap()).unwrap();
            let mut s = BTreeMap::new();
            shape("$", &v, &mut s);
            all.insert(format!("{name}/{file}"), s);
        }
    }
    let text = serde_json::to_string_pretty(&all).unwrap() + "\n";
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_schema.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &text).unwrap();
    }
    let expected = fs::read_to_string(&golden).expect("golden file missing; run with UPDATE_GOLDEN=1");
    assert_eq!(text, expected, "report schema changed");
}
