use std::path::{Path, PathBuf};
use std::process::Command;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn sae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sae-gpg"))
}

fn inputs(cmd: &mut Command) -> &mut Command {
    cmd.arg("--data")
        .arg(data("fixture.csv"))
        .arg("--schema")
        .arg(data("schema.json"))
        .arg("--models")
        .arg(data("candidates.json"))
}

#[test]
fn decompose_smoke() {
    let out = tempfile::tempdir().unwrap();
    let st = inputs(sae().arg("decompose"))
        .args(["--model", "MS5", "--iterations", "20", "--seed", "4", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(out.path().join("decomposition.csv")).unwrap();
    // header, ten areas, global
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().last().unwrap().starts_with("global,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "decompose");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn fit_writes_both_genders() {
    let out = tempfile::tempdir().unwrap();
    let st = inputs(sae().arg("fit")).args(["--model", "MS1", "--out"]).arg(out.path()).status().unwrap();
    assert!(st.success());
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit[0]["label"], "MS1");
    assert_eq!(fit[0]["men"]["gender"], "men");
    assert_eq!(fit[0]["women"]["gender"], "women");
}

#[test]
fn config_errors_are_enumerated() {
    let out = tempfile::tempdir().unwrap();
    let st = sae()
        .args(["select", "--data", "missing.csv", "--reps", "10", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(report["error"], "config");
    // data, schema, models, seed, reps
    assert_eq!(report["problems"].as_array().unwrap().len(), 5);
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "wage,gender,area,experience,education,occupation\n-1,men,1,3,Higher,Services\n").unwrap();
    let st = sae()
        .args(["fit", "--data"])
        .arg(&bad)
        .arg("--schema")
        .arg(data("schema.json"))
        .arg("--models")
        .arg(data("candidates.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));
}

#[test]
fn simulate_tables_have_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sae_gpg::simulation::GeneratorConfig::desk();
    cfg.areas.truncate(4);
    for a in &mut cfg.areas {
        a.men.n = 50;
        a.women.n = 40;
    }
    let gen = dir.path().join("generator.json");
    std::fs::write(&gen, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("out");
    let st = sae()
        .args(["simulate", "--replicates", "5", "--iterations", "10", "--reps", "50", "--seed", "2"])
        .args(["--drop", "education", "--generator"])
        .arg(&gen)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for table in ["emse.csv", "coverage.csv"] {
        let text = std::fs::read_to_string(out.join(table)).unwrap();
        let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels, ["OB", "MS1", "MS2", "MS3", "MS4", "MS5", "MS6", "MS7", "MS8", "XG"]);
        assert!(text.lines().all(|l| l.split(',').count() == 5));
    }
}
