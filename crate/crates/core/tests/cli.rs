use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dyadrep(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_dyadrep"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn report(dir: &Path, name: &str) -> Value {
    let text = std::fs::read_to_string(dir.join("out").join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

const SMALL: &str = r#"{ "grid": { "mesh": 4 }, "ladder": [0.125, 0.25, 0.5], "corpus": { "triples": 3 },
    "trials": 20, "grids": 1, "sparse_mesh": 6 }"#;

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dyadrep(dir.path(), r#"{ "eta": 1.5 }"#, &["sparse"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dyadrep(dir.path(), r#"{ "no_such_field": 1 }"#, &["sparse"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dyadrep(dir.path(), SMALL, &["decompose", "--eta", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_kernel_decomposes_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replacen('{', r#"{ "kernel": "zero","#, 1);
    let out = dyadrep(dir.path(), &cfg, &["decompose"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(dir.path(), "decompose");
    for row in rep["rows"].as_array().unwrap() {
        for key in ["sigma1", "sigma2", "sigma3", "remainder", "reference"] {
            assert_eq!(row[key].as_f64().unwrap(), 0.0, "{key}");
        }
    }
    for f in ["decompose.json", "decompose.csv", "decompose.config.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn sparse_on_constants_is_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = dyadrep(dir.path(), SMALL, &["sparse", "--eta", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(dir.path(), "sparse");
    let cubes = rep["families"][0]["collection"]["cubes"].as_array().unwrap();
    assert_eq!(cubes.len(), 1);
    assert_eq!(cubes[0]["level"].as_i64(), Some(0));
    assert_eq!(rep["failures"].as_u64(), Some(0));
}

#[test]
fn coeff_bounds_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dyadrep(dir.path(), SMALL, &["coeff-bounds", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = report(dir.path(), "coeff-bounds");
    assert_eq!(rep["passed"], rep["coefficients"]);
    let echoed = report(dir.path(), "coeff-bounds.config");
    assert_eq!(echoed["seed"].as_u64(), Some(3));
}
