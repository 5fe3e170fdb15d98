//! End-to-end checks of the command-line interface: round-trips through the
//! filesystem, exit codes, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tupi"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tupi_cli_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn spec_file(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(
        &path,
        r#"{"n": 60, "gt_feature_noise": [0.2], "train_pairs": 60, "validation_pairs": 30, "test_pairs": 300}"#,
    )
    .unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_denoise_round_trips() {
    let dir = tmp("synth");
    let spec = spec_file(&dir);
    for sub in ["a", "b"] {
        run_ok(
            bin()
                .args(["synth", "--seed", "4", "--out"])
                .arg(dir.join(sub))
                .arg("--spec")
                .arg(&spec),
        );
    }
    for file in [
        "g.csv",
        "f_star.csv",
        "gt0_sigma0.2.csv",
        "train_pairs.csv",
        "validation_pairs.csv",
        "test_pairs.csv",
    ] {
        assert_eq!(
            read(&dir.join("a").join(file)),
            read(&dir.join("b").join(file)),
            "{file} differs between identical synth runs"
        );
    }

    // the generated task feeds straight back into denoise
    let refined = dir.join("refined.csv");
    let out = run_ok(
        bin()
            .args(["denoise", "--lambda", "1", "--rank", "16", "--max-iters", "5"])
            .arg("--predictions")
            .arg(dir.join("a/f_star.csv"))
            .arg("--features")
            .arg(dir.join("a/gt0_sigma0.2.csv"))
            .arg("--validation")
            .arg(dir.join("a/validation_pairs.csv"))
            .arg("--out")
            .arg(&refined),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("validation accuracy"));
    let lines = read(&refined);
    assert_eq!(lines.lines().count(), 60);
    for line in lines.lines() {
        line.parse::<f64>().unwrap();
    }

    let refined2 = dir.join("refined2.csv");
    run_ok(
        bin()
            .args(["denoise", "--lambda", "1", "--rank", "16", "--max-iters", "5"])
            .arg("--predictions")
            .arg(dir.join("a/f_star.csv"))
            .arg("--features")
            .arg(dir.join("a/gt0_sigma0.2.csv"))
            .arg("--validation")
            .arg(dir.join("a/validation_pairs.csv"))
            .arg("--out")
            .arg(&refined2),
    );
    assert_eq!(read(&refined), read(&refined2));
}

#[test]
fn tune_prints_chosen_cell() {
    let dir = tmp("tune");
    let spec = spec_file(&dir);
    run_ok(
        bin()
            .args(["synth", "--seed", "9", "--out"])
            .arg(dir.join("task"))
            .arg("--spec")
            .arg(&spec),
    );
    let out = run_ok(
        bin()
            .args(["tune", "--rank", "16", "--max-iters", "5"])
            .arg("--predictions")
            .arg(dir.join("task/f_star.csv"))
            .arg("--features")
            .arg(dir.join("task/gt0_sigma0.2.csv"))
            .arg("--validation")
            .arg(dir.join("task/validation_pairs.csv")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("lambda") && stdout.contains("sigma_w_sq"),
        "tune output missing chosen cell: {stdout}"
    );
}

#[test]
fn experiment_report_round_trip_is_deterministic() {
    let dir = tmp("experiment");
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"seed": 5,
                "spec": {{"n": 60, "gt_feature_noise": [0.2], "train_pairs": 60,
                          "validation_pairs": 30, "test_pairs": 300}},
                "methods": ["tupi", "coconut"],
                "grids": {{"tupi": [[1.0, 1.0], [10.0, 1.0]]}},
                "output_dir": "{}", "rank": 16, "max_iters": 10}}"#,
            dir.join("out1").display()
        ),
    )
    .unwrap();
    run_ok(bin().args(["experiment", "--config"]).arg(&config));
    let report1 = read(&dir.join("out1/report.json"));

    run_ok(
        bin()
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.join("out2")),
    );
    let report2 = read(&dir.join("out2/report.json"));

    let strip = |body: &str| -> serde_json::Value {
        let mut v: serde_json::Value = serde_json::from_str(body).unwrap();
        v["initial"]["wall_time_ms"] = 0.into();
        for (_, m) in v["methods"].as_object_mut().unwrap() {
            m["wall_time_ms"] = 0.into();
        }
        v
    };
    assert_eq!(strip(&report1), strip(&report2));

    let out = run_ok(
        bin()
            .args(["report", "--path"])
            .arg(dir.join("out1/report.json")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("initial") && stdout.contains("tupi") && stdout.contains("coconut"));
}

#[test]
fn baseline_runs_each_method() {
    let dir = tmp("baseline");
    let spec = spec_file(&dir);
    run_ok(
        bin()
            .args(["synth", "--seed", "2", "--out"])
            .arg(dir.join("task"))
            .arg("--spec")
            .arg(&spec),
    );
    for method in ["coconut", "ssl", "combined1", "combined2"] {
        let out = run_ok(
            bin()
                .args(["baseline", "--method", method, "--rank", "16", "--max-iters", "5"])
                .arg("--predictions")
                .arg(dir.join("task/f_star.csv"))
                .arg("--features")
                .arg(dir.join("task/gt0_sigma0.2.csv"))
                .arg("--validation")
                .arg(dir.join("task/validation_pairs.csv"))
                .arg("--test")
                .arg(dir.join("task/test_pairs.csv")),
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains(method), "missing {method} line: {stdout}");
    }
}

#[test]
fn exit_codes_distinguish_parse_and_numerical_failures() {
    let dir = tmp("exits");

    // missing file
    let out = bin()
        .args(["denoise"])
        .arg("--predictions")
        .arg(dir.join("absent.csv"))
        .arg("--features")
        .arg(dir.join("absent_too.csv"))
        .arg("--validation")
        .arg(dir.join("absent_pairs.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // malformed CSV
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "1.0\nnot-a-number\n").unwrap();
    let pairs = dir.join("pairs.csv");
    std::fs::write(&pairs, "0,1\n").unwrap();
    let out = bin()
        .args(["denoise"])
        .arg("--predictions")
        .arg(&bad)
        .arg("--features")
        .arg(&bad)
        .arg("--validation")
        .arg(&pairs)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv"));

    // structurally valid input that is numerically degenerate: a constant
    // feature has no usable kernel bandwidth
    let preds = dir.join("preds.csv");
    std::fs::write(
        &preds,
        (0..12).map(|i| format!("{}.5\n", i)).collect::<String>(),
    )
    .unwrap();
    let constant = dir.join("constant.csv");
    std::fs::write(&constant, "1.0\n".repeat(12)).unwrap();
    let vpairs = dir.join("vpairs.csv");
    std::fs::write(&vpairs, "0,1\n2,3\n4,5\n").unwrap();
    let out = bin()
        .args(["denoise", "--rank", "4"])
        .arg("--predictions")
        .arg(&preds)
        .arg("--features")
        .arg(&constant)
        .arg("--validation")
        .arg(&vpairs)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // config naming an unknown method
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{"spec": {"n": 20}, "methods": ["definitely-not-a-method"]}"#,
    )
    .unwrap();
    let out = bin()
        .args(["experiment", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
