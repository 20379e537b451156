use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use circe::harness::{read_records, CSV_COLUMNS};

fn circe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circe")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &str = r#"{
    "cases": ["uni1"],
    "methods": ["none", "circe"],
    "gammas": [10.0],
    "seeds": [3],
    "n_samples": 400,
    "holdout": 60,
    "n_interventions": 4,
    "lambda_grid": [0.1, 1.0],
    "sigma2_grid": [0.1, 1.0],
    "train": { "epochs": 2, "batch_size": 64, "hidden": [8, 8] }
}"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"nope": 1}"#);
    let out = circe(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = circe(&["sweep", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"eval_fraction": 1.5}"#);
    assert_eq!(code(&circe(&["gen", "--config", &cfg])), 2);
    let cfg = write_config(dir.path(), SMALL);
    let out = circe(&["sweep", "--config", &cfg, "--workers", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_writes_one_csv_per_case_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = circe(&["gen", "--config", &cfg, "--seed", "9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("uni1_seed9.csv")).unwrap();
    assert_eq!(text.lines().count(), 401);
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = circe(&["sweep", "--config", &cfg, "--workers", "2", "--out", d]);
    assert!(matches!(code(&out), 0 | 4), "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert!(text.lines().skip(1).all(|l| l.starts_with("1,")));
    let records = read_records(text.as_bytes()).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.seed == 3));
    assert!(records[0].statistic_final.is_nan());
    assert!(records[1].statistic_final.is_finite());

    let out = circe(&["report", "--out", d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn train_and_fit_cme_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = circe(&["fit-cme", "--config", &cfg, "--out", d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cme_uni1_seed3.json").exists());

    let out = circe(&["train", "--config", &cfg, "--out", d]);
    assert!(matches!(code(&out), 0 | 4));
    for f in ["results.csv", "model.json", "log.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = circe(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}
