//! End-to-end tests of the compiled binary: the gen → train → eval
//! pipeline, sweep configs, influence reports, and the exit-code contract
//! (0 ok, 2 config error, 3 numeric failure).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn feeder13() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../ppgn-core/fixtures/feeder13.json")
}

fn feeder36() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../ppgn-core/fixtures/feeder36.json")
}

fn ppgn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppgn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_grid(dir: &Path) -> PathBuf {
    let path = dir.join("grid.json");
    fs::write(&path, r#"{"kinds": ["spg"], "impedance_draws": 2}"#).unwrap();
    path
}

fn gen_dataset(dir: &Path, feeder: &Path) -> PathBuf {
    let grid = write_grid(dir);
    let data = dir.join("data");
    let out = ppgn(&[
        "gen",
        "--feeder",
        feeder.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_ok(&out);
    data
}

#[test]
fn pipeline_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), &feeder13());
    assert!(data.join("manifest.json").exists());
    assert!(data.join("samples.ndjson").exists());

    let ckpt = dir.path().join("ckpt.json");
    let out = ppgn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--stage",
        "both",
        "--labels",
        "1.0",
        "--seed",
        "5",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let csv1 = dir.path().join("base1.csv");
    let out = ppgn(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scenario",
        "base",
        "--out",
        csv1.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = fs::read_to_string(&csv1).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario,seed,beta,stage,f1,lar,lar1hop,runtime_s"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["base", "5", "1", "stage12"]);
    let lar: f64 = row[5].parse().unwrap();
    assert!((0.0..=1.0).contains(&lar));

    // Same command again: identical results up to the runtime column.
    let csv2 = dir.path().join("base2.csv");
    let out = ppgn(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scenario",
        "base",
        "--out",
        csv2.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let strip = |t: &str| -> Vec<String> {
        t.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(
        strip(&text),
        strip(&fs::read_to_string(&csv2).unwrap()),
        "repeated evaluation drifted"
    );

    let load_csv = dir.path().join("load.csv");
    let out = ppgn(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scenario",
        "load:0.10",
        "--out",
        load_csv.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(fs::read_to_string(&load_csv)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("load:+0.10,"));
}

#[test]
fn eval_scenario_and_mismatch_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), &feeder13());
    let ckpt = dir.path().join("ckpt.json");
    let out = ppgn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--stage",
        "1",
        "--labels",
        "1.0",
        "--seed",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let csv = dir.path().join("out.csv");
    for scenario in ["switch:99", "bogus", "load:x"] {
        let out = ppgn(&[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--scenario",
            scenario,
            "--out",
            csv.to_str().unwrap(),
        ]);
        assert_exit(&out, 2);
    }

    // Checkpoint trained against one feeder, dataset from another.
    let other_dir = tempfile::tempdir().unwrap();
    let other = gen_dataset(other_dir.path(), &feeder36());
    let out = ppgn(&[
        "eval",
        "--data",
        other.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scenario",
        "base",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn train_flag_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path(), &feeder13());
    let ckpt = dir.path().join("ckpt.json");
    let out = ppgn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--stage",
        "1",
        "--labels",
        "1.5",
        "--seed",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn gen_rejects_missing_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppgn(&[
        "gen",
        "--feeder",
        feeder13().to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
        "--grid",
        dir.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn sweep_runs_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep-out");
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        format!(
            r#"{{
  "format": "ppgn-exp-v1",
  "feeder": "{}",
  "grid": {{"kinds": ["spg"], "impedance_draws": 2}},
  "gen_seed": 3,
  "beta": 0.5,
  "seeds": [1, 2],
  "arms": ["stage1", "mlp"],
  "ood": [{{"kind": "load", "increment": 0.05}}],
  "ood_draws": 1,
  "out_dir": "{}"
}}"#,
            feeder13().display(),
            out_dir.display()
        ),
    )
    .unwrap();
    let out = ppgn(&["sweep", "--config", config.to_str().unwrap()]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    // stage1 gets base + 1 OOD row per seed; mlp base only.
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(out_dir.join("manifest.json").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"format": "ppgn-exp-v1"}"#).unwrap();
    assert_exit(&ppgn(&["sweep", "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn influence_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("inf.csv");
    let out = ppgn(&[
        "influence",
        "--feeder",
        feeder13().to_str().unwrap(),
        "--kI",
        "2",
        "--layers",
        "3",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "node,total_observed_influence,covered"
    );
    assert_eq!(text.lines().count(), 1 + 13);

    // More neighbors than the feeder has nodes: numeric failure.
    let out = ppgn(&[
        "influence",
        "--feeder",
        feeder13().to_str().unwrap(),
        "--kI",
        "50",
        "--layers",
        "3",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
}
