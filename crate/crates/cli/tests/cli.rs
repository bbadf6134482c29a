use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TOY: [&str; 10] = [
    "--set",
    "per_class_train=4",
    "--set",
    "val_total=8",
    "--set",
    "test_total=20",
    "--set",
    "delta=0.01",
    "--set",
    "record_wall_time=false",
];

fn lyapctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lyapctl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path) {
    let o = lyapctl(dir, &["synth", "--out", "toy"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn run(dir: &Path, run_dir: &str, seeds: &str, extra: &[&str]) -> Output {
    let seeds = format!("seeds={seeds}");
    let mut args = vec![
        "--run-dir",
        run_dir,
        "--set",
        "dataset=toy",
        "--set",
        &seeds,
    ];
    args.extend(TOY);
    args.extend(extra);
    args.push("run");
    lyapctl(dir, &args)
}

#[test]
fn full_pipeline_writes_artifacts_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = run(tmp.path(), "r", "0,1", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean ± std"));
    for row in ["SGC ", "SGC + replacement", "SGC + node only"] {
        assert!(stdout.contains(row), "missing row {row}");
    }

    let r = tmp.path().join("r");
    assert!(r.join("prepared/pca.json").is_file());
    assert!(r.join("prepared/bundle/meta.json").is_file());
    for f in [
        "splits.json",
        "sgc.json",
        "sgc_metrics.json",
        "controller.json",
        "lyapunov.json",
        "plant.json",
        "cegis_report.json",
        "verifier_report.json",
    ] {
        assert!(r.join("seed-0").join(f).is_file(), "missing {f}");
    }

    let results = json(&r.join("results.json"));
    let per_seed = results["per_seed"].as_array().unwrap();
    assert_eq!(per_seed.len(), 2);
    let before: Vec<f64> = per_seed
        .iter()
        .map(|s| s["accuracy_before"].as_f64().unwrap())
        .collect();
    let mean = before.iter().sum::<f64>() / 2.0;
    let std = (before.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((results["accuracy_before"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((results["accuracy_before"]["std"].as_f64().unwrap() - std).abs() < 1e-12);

    let metrics = json(&r.join("seed-0/sgc_metrics.json"));
    assert!(metrics["test_accuracy"].as_f64().unwrap() >= 0.95);

    let report = json(&r.join("seed-0/cegis_report.json"));
    assert_eq!(report["certified"], Value::Bool(true));
    assert_eq!(report["eps"].as_f64(), Some(0.1));
    let rounds: Vec<u64> = report["rounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["round"].as_u64().unwrap())
        .collect();
    assert!(rounds.windows(2).all(|w| w[0] < w[1]));
    let vrep = json(&r.join("seed-0/verifier_report.json"));
    assert_eq!(vrep["eps"].as_f64(), Some(0.1));

    let o = lyapctl(tmp.path(), &["--run-dir", "r", "verify", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verdict"], "certified");

    let o = lyapctl(
        tmp.path(),
        &["--run-dir", "r", "export-embeddings", "--seed", "0"],
    );
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(r.join("seed-0/embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 23);
}

#[test]
fn reruns_are_byte_identical_and_parallel_seeds_match() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    assert_eq!(code(&run(tmp.path(), "a", "0,1", &[])), 0);
    assert_eq!(
        code(&run(tmp.path(), "b", "0,1", &["--parallel-seeds", "2"])),
        0
    );
    for f in [
        "seed-0/splits.json",
        "seed-0/sgc.json",
        "seed-1/cegis_report.json",
        "seed-1/controller.json",
        "results.json",
        "prepared/pca.json",
    ] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn stages_can_run_separately_with_stored_config() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    std::fs::write(
        tmp.path().join("toy.cfg"),
        "dataset = toy\nseeds = 3\nper_class_train = 4\nval_total = 8\ntest_total = 20\ndelta = 0.01\n",
    )
    .unwrap();
    let o = lyapctl(
        tmp.path(),
        &["--config", "toy.cfg", "--run-dir", "s", "prepare"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for stage in ["train-gnn", "cegis", "eval"] {
        let o = lyapctl(tmp.path(), &["--run-dir", "s", stage]);
        assert_eq!(
            code(&o),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(tmp.path().join("s/seed-3/cegis_report.json").is_file());
}

#[test]
fn uncertified_run_exits_3_and_still_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = run(tmp.path(), "r", "0", &["--set", "max_rounds=0"]);
    assert_eq!(code(&o), 3);
    let report = json(&tmp.path().join("r/seed-0/cegis_report.json"));
    assert_eq!(report["certified"], Value::Bool(false));
    assert!(tmp.path().join("r/results.json").is_file());
}

#[test]
fn input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lyapctl(
        tmp.path(),
        &["--run-dir", "r", "--set", "dataset=nowhere", "prepare"],
    );
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    let o = lyapctl(
        tmp.path(),
        &["--run-dir", "r", "--set", "no_such_key=1", "prepare"],
    );
    assert_eq!(code(&o), 2);

    let o = lyapctl(
        tmp.path(),
        &["--run-dir", "r", "--set", "seeds=", "prepare"],
    );
    assert_eq!(code(&o), 2);

    synth(tmp.path());
    assert_eq!(code(&run(tmp.path(), "r", "0", &[])), 0);
    let ctrl = tmp.path().join("r/seed-0/controller.json");
    let text = std::fs::read_to_string(&ctrl).unwrap();
    std::fs::write(&ctrl, &text[..text.len() / 2]).unwrap();
    let o = lyapctl(tmp.path(), &["--run-dir", "r", "verify"]);
    assert_eq!(code(&o), 2);

    let plant = tmp.path().join("r/seed-0/plant.json");
    let mut p = json(&plant);
    p["gain"] = Value::from(-1.0);
    std::fs::write(&plant, p.to_string()).unwrap();
    let o = lyapctl(tmp.path(), &["--run-dir", "r", "eval"]);
    assert_eq!(code(&o), 2);
}
