mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;
use wasserquick::cli::{run, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK};
use wasserquick::lfd::LfdSolution;

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn wq(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("wasserquick").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_config(dir: &TempDir, patch: impl FnOnce(&mut Value)) -> PathBuf {
    let mut config: Value = serde_json::from_str(include_str!("../configs/smoke.json")).unwrap();
    patch(&mut config);
    write(dir, "config.json", &config.to_string())
}

fn gaussian_file(dir: &TempDir, name: &str, n: usize, mean: f64, seed: u64) -> PathBuf {
    let mut rng = common::rng(seed);
    let text: String = (0..n).map(|_| format!("{}\n", mean + common::normal(&mut rng))).collect();
    write(dir, name, &text)
}

#[test]
fn solve_lfd_two_point_case() {
    let dir = TempDir::new().unwrap();
    let pre = write(&dir, "pre.csv", "x\n0.0\n");
    let post = write(&dir, "post.csv", "1.0\n");
    let lfd = dir.path().join("lfd.json");
    let o = wq(&["solve-lfd", s(&pre), s(&post), "--r1", "0.25", "--r2", "0.25", "--out", s(&lfd)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.is_empty());
    assert!(o.stderr.contains("objective: 0.5493"), "{}", o.stderr);
    assert!(o.stderr.contains("condition holds"), "{}", o.stderr);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&lfd).unwrap()).unwrap();
    assert!((doc["objective"].as_f64().unwrap() - 0.5 * 3f64.ln()).abs() < 1e-4);
    for key in ["support", "p1", "p2", "objective", "gap", "r1", "r2", "metric"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn solved_lfd_round_trips_through_verify() {
    let dir = TempDir::new().unwrap();
    let pre = gaussian_file(&dir, "pre.csv", 15, 0.0, 1);
    let post = gaussian_file(&dir, "post.csv", 15, 1.0, 2);
    let lfd = dir.path().join("lfd.json");
    let o = wq(&["solve-lfd", s(&pre), s(&post), "--r1", "0.3", "--r2", "0.3", "--out", s(&lfd), "-q"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stderr.is_empty());
    let solution = LfdSolution::from_json(&std::fs::read_to_string(&lfd).unwrap()).unwrap();
    solution.validate(1e-8).unwrap();

    let o = wq(&["verify", s(&lfd)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let report: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(report["objective"].as_f64().unwrap(), solution.objective);
    assert_eq!(report["supportSize"].as_u64().unwrap(), 30);
    assert!(report["weaklyBounded"].is_boolean());
}

#[test]
fn identical_files_have_zero_objective() {
    let dir = TempDir::new().unwrap();
    let pre = gaussian_file(&dir, "pre.csv", 10, 0.0, 3);
    let o = wq(&["solve-lfd", s(&pre), s(&pre), "--r1", "0.1", "--r2", "0.1"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let doc: Value = serde_json::from_str(&o.stdout).unwrap();
    assert!(doc["objective"].as_f64().unwrap().abs() < 1e-9);
}

#[test]
fn disjoint_points_with_zero_radii_exit_infeasible() {
    let dir = TempDir::new().unwrap();
    let pre = write(&dir, "pre.csv", "0\n");
    let post = write(&dir, "post.csv", "1\n");
    let o = wq(&["solve-lfd", s(&pre), s(&post), "--r1", "0", "--r2", "0"]);
    assert_eq!(o.code, EXIT_INFEASIBLE, "{}", o.stderr);
}

#[test]
fn malformed_samples_name_row_and_column() {
    let dir = TempDir::new().unwrap();
    let pre = write(&dir, "pre.csv", "0.1,0.2\n0.3,oops\n");
    let post = write(&dir, "post.csv", "1,1\n");
    let o = wq(&["solve-lfd", s(&pre), s(&post), "--r1", "0.1", "--r2", "0.1"]);
    assert_eq!(o.code, EXIT_INPUT);
    assert!(o.stderr.contains("row 2") && o.stderr.contains("column 2"), "{}", o.stderr);

    let ragged = write(&dir, "ragged.csv", "0.1,0.2\n0.3\n");
    let o = wq(&["solve-lfd", s(&ragged), s(&post), "--r1", "0.1", "--r2", "0.1"]);
    assert_eq!(o.code, EXIT_INPUT);
    assert!(o.stderr.contains("row 2"), "{}", o.stderr);
}

#[test]
fn solve_lfd_refuses_csv_output() {
    let dir = TempDir::new().unwrap();
    let pre = write(&dir, "pre.csv", "0\n");
    let o = wq(&["solve-lfd", s(&pre), s(&pre), "--r1", "0", "--r2", "0", "--format", "csv"]);
    assert_eq!(o.code, EXIT_INPUT);
}

#[test]
fn bin_examples() {
    let dir = TempDir::new().unwrap();
    let four = write(&dir, "four.csv", "1\n2\n3\n4\n");
    let o = wq(&["bin", s(&four), "--L", "2"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let doc: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(doc["edges"], serde_json::json!([2.5]));
    assert_eq!(doc["masses"].as_array().unwrap().len(), 2);

    let fifty = gaussian_file(&dir, "fifty.csv", 50, 0.0, 4);
    let o = wq(&["bin", s(&fifty), "--L", "20"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let doc: Value = serde_json::from_str(&o.stdout).unwrap();
    let edges: Vec<f64> = doc["edges"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(edges.len(), 19);
    assert!(edges.windows(2).all(|w| w[0] < w[1]));

    let o = wq(&["bin", s(&fifty), "--L", "20", "--format", "csv"]);
    assert_eq!(o.code, EXIT_OK);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[0], "bin,lower,upper,mass");
    assert_eq!(lines.len(), 21);

    assert_eq!(wq(&["bin", s(&fifty), "--L", "1"]).code, EXIT_INPUT);
    assert_eq!(wq(&["bin", s(&four), "--L", "5"]).code, EXIT_INPUT);
}

#[test]
fn compare_smoke_writes_one_row_per_method_and_target() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |_| {});
    let o = wq(&["--config", s(&config), "compare"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let mut reader = csv::Reader::from_reader(o.stdout.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["method", "gamma", "arl", "arl_stderr", "edd", "edd_stderr", "reps"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    let mut keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 10);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() >= 1.0);
    }
}

#[test]
fn contamination_sweep_labels_each_curve() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |c| {
        c["methods"] = serde_json::json!(["exact", "glr"]);
        c["sim"]["epsList"] = serde_json::json!([0.1, 0.3]);
    });
    let o = wq(&["--config", s(&config), "compare", "--format", "json"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let doc: Value = serde_json::from_str(&o.stdout).unwrap();
    let mut labels: Vec<String> = doc["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["method"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(labels.len(), 8);
    labels.sort();
    labels.dedup();
    assert_eq!(labels, ["exact[eps=0.1]", "exact[eps=0.3]", "glr[eps=0.1]", "glr[eps=0.3]"]);
}

#[test]
fn seed_determines_output_bytes() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |c| c["methods"] = serde_json::json!(["exact", "robust-was"]));
    let first = wq(&["--config", s(&config), "--seed", "5", "compare"]);
    let second = wq(&["--config", s(&config), "--seed", "5", "compare"]);
    let other = wq(&["--config", s(&config), "--seed", "6", "compare"]);
    assert_eq!(first.code, EXIT_OK, "{}", first.stderr);
    assert_eq!(first.stdout, second.stdout);
    assert_ne!(first.stdout, other.stdout);
}

#[test]
fn output_path_from_flag_or_config() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("curves.csv");
    let target_str = target.to_str().unwrap().to_string();
    let config = smoke_config(&dir, |c| {
        c["methods"] = serde_json::json!(["exact"]);
        c["io"]["outputPath"] = Value::String(target_str);
    });
    let o = wq(&["--config", s(&config), "compare"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.is_empty());
    assert!(std::fs::read_to_string(&target).unwrap().starts_with("method,gamma,"));

    let flag = dir.path().join("flag.json");
    let o = wq(&["--config", s(&config), "--out", s(&flag), "--format", "json", "compare"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&flag).unwrap()).unwrap();
    assert_eq!(doc["points"].as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |c| c["detector"]["h"] = serde_json::json!(-1.0));
    let o = wq(&["--config", s(&config), "compare"]);
    assert_eq!(o.code, EXIT_INPUT);
    assert!(o.stderr.contains("detector.h"), "{}", o.stderr);

    let config = smoke_config(&dir, |c| c["sim"]["repz"] = serde_json::json!(5));
    let o = wq(&["--config", s(&config), "calibrate"]);
    assert_eq!(o.code, EXIT_INPUT);
    assert!(o.stderr.contains("repz"), "{}", o.stderr);

    let o = wq(&["compare"]);
    assert_eq!(o.code, EXIT_INPUT);
    assert!(o.stderr.contains("--config"));
}

#[test]
fn calibrate_reports_thresholds() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |c| c["methods"] = serde_json::json!(["exact", "robust-kl-binned"]));
    let o = wq(&["--config", s(&config), "calibrate"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[0], "method,gamma,threshold,arl,arl_stderr,reps,truncated");
    assert_eq!(lines.len(), 5);
}

#[test]
fn calibration_that_cannot_reach_the_target_is_numerical() {
    let dir = TempDir::new().unwrap();
    let config = smoke_config(&dir, |c| {
        c["methods"] = serde_json::json!(["exact"]);
        c["sim"]["gammaList"] = serde_json::json!([1000]);
        c["sim"]["horizon"] = serde_json::json!(20);
    });
    let o = wq(&["--config", s(&config), "calibrate"]);
    assert_eq!(o.code, EXIT_NUMERICAL, "{}", o.stderr);
}

#[test]
fn simulate_with_a_saved_lfd() {
    let dir = TempDir::new().unwrap();
    let pre = gaussian_file(&dir, "pre.csv", 20, 0.0, 5);
    let post = gaussian_file(&dir, "post.csv", 20, 1.0, 6);
    let lfd = dir.path().join("lfd.json");
    assert_eq!(
        wq(&["solve-lfd", s(&pre), s(&post), "--r1", "0.3", "--r2", "0.3", "--out", s(&lfd)]).code,
        EXIT_OK
    );
    let config = smoke_config(&dir, |c| c["methods"] = serde_json::json!(["exact", "robust-was", "glr"]));
    let o = wq(&["--config", s(&config), "simulate", "--lfd", s(&lfd)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let mut reader = csv::Reader::from_reader(o.stdout.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["method", "gamma", "threshold", "stopped_at", "false_alarm", "delay"]
    );
    for row in reader.records() {
        let row = row.unwrap();
        let stopped: Option<u64> = row[3].parse().ok();
        let false_alarm: bool = row[4].parse().unwrap();
        let delay: Option<u64> = row[5].parse().ok();
        match stopped {
            Some(t) if t < 50 => assert!(false_alarm && delay.is_none()),
            Some(t) => assert_eq!(delay, Some(t - 50 + 1)),
            None => assert!(!false_alarm && delay.is_none()),
        }
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(wq(&["--config", s(&config), "simulate", "--lfd", s(&missing)]).code, EXIT_INPUT);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_wasserquick");
    let dir = TempDir::new().unwrap();
    let pre = write(&dir, "pre.csv", "0\n");
    let post = write(&dir, "post.csv", "1\n");
    let status = |args: &[&str]| Command::new(exe).args(args).output().unwrap().status.code();
    assert_eq!(status(&["solve-lfd", s(&pre), s(&post), "--r1", "0.25", "--r2", "0.25"]), Some(0));
    assert_eq!(status(&["solve-lfd", s(&pre), s(&post), "--r1", "0", "--r2", "0"]), Some(2));
    assert_eq!(status(&["no-such-command"]), Some(1));
    assert_eq!(status(&["--help"]), Some(0));
}
