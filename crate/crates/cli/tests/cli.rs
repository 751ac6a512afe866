use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = "population_size = 200\ndays = 3\n\n[bo]\ninitial_design = 2\nwelfare_window = 2\n";

fn tcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcsim")).args(args).output().expect("spawn tcsim")
}

fn small_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn summary(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn base_run_writes_metrics_and_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let out = tmp.path().join("base");
    ok(&tcsim(&["run", "base", "--scenario", s(&sc), "--out", s(&out)]));
    // header plus one row per day
    assert_eq!(lines(&out.join("metrics.csv")), 4);
    assert!(lines(&out.join("trips.csv")) > 200);
    assert!(!out.join("transactions.csv").exists());
    let sum = summary(&out.join("summary.json"));
    assert_eq!(sum["label"], "base");
    assert_eq!(sum["days"], 3);
}

#[test]
fn toll_params_accept_minutes_and_clock_time() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&tcsim(&["run", "toll", "--scenario", s(&sc), "--params", "0.0194,539,72", "--out", s(&a)]));
    ok(&tcsim(&["run", "toll", "--scenario", s(&sc), "--params", "0.0194,8:59,72", "--out", s(&b), "--emit-transactions"]));
    assert_eq!(
        fs::read(a.join("toll_profile.csv")).unwrap(),
        fs::read(b.join("toll_profile.csv")).unwrap()
    );
    assert_eq!(lines(&a.join("toll_profile.csv")), 289);
    assert!(lines(&b.join("transactions.csv")) > 1);
    let sum = summary(&a.join("summary.json"));
    assert_eq!(sum["tariff"][1], 539.0);
    assert!(sum["welfare_gain_per_capita"].is_number());
}

#[test]
fn toll_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let a = tmp.path().join("a");
    ok(&tcsim(&["run", "toll", "--scenario", s(&sc), "--params", "0.01,480,60", "--out", s(&a)]));
    let b = tmp.path().join("b");
    let profile = a.join("toll_profile.csv");
    ok(&tcsim(&["run", "toll", "--scenario", s(&sc), "--toll-file", s(&profile), "--out", s(&b)]));
    assert_eq!(fs::read(a.join("trips.csv")).unwrap(), fs::read(b.join("trips.csv")).unwrap());
}

#[test]
fn bo_history_has_one_row_per_acquisition() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let out = tmp.path().join("bo");
    ok(&tcsim(&["run", "bo", "--scenario", s(&sc), "--iterations", "3", "--out", s(&out)]));
    let history = fs::read_to_string(out.join("bo_history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.ends_with(",initial")).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",ucb")).count(), 3);
    assert!(out.join("toll_profile.csv").exists());
    assert_eq!(summary(&out.join("summary.json"))["label"], "bo");
}

#[test]
fn replications_use_distinct_seeds_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let out = tmp.path().join("reps");
    ok(&tcsim(&[
        "run", "toll", "--scenario", s(&sc), "--params", "0.0196,534,66", "--threshold", "1", "--replications", "3",
        "--seed", "5", "--out", s(&out),
    ]));
    let seeds: Vec<u64> = (0..3)
        .map(|r| summary(&out.join(format!("rep-{r}/summary.json")))["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![5, 6, 7]);
    let agg = summary(&out.join("summary.json"));
    assert_eq!(agg["replications"], 3);
    assert_eq!(agg["seeds"], serde_json::json!([5, 6, 7]));
    let sells = &agg["metrics"]["sells"];
    assert!(sells["mean"].is_number() && sells["std"].is_number());
    assert_ne!(
        fs::read(out.join("rep-0/trips.csv")).unwrap(),
        fs::read(out.join("rep-1/trips.csv")).unwrap()
    );
}

#[test]
fn compare_tabulates_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let (a, b) = (tmp.path().join("t0"), tmp.path().join("t1"));
    ok(&tcsim(&["run", "toll", "--scenario", s(&sc), "--params", "0.0194,539,72", "--out", s(&a)]));
    ok(&tcsim(&[
        "run", "toll", "--scenario", s(&sc), "--params", "0.0194,539,72", "--threshold", "1", "--out", s(&b),
    ]));
    let out = tmp.path().join("cmp");
    let res = tcsim(&["run", "compare", s(&a), s(&b), "--out", s(&out)]);
    ok(&res);
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.contains("sells") && table.contains("welfare"), "{table}");
    assert!(lines(&out.join("compare.csv")) > 1);
}

fn single_line_failure(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn errors_exit_one_with_a_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let out = tmp.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "toll", "--scenario", s(&sc), "--out", s(&out)],
        vec!["run", "toll", "--scenario", s(&sc), "--params", "0.01,9:75,60", "--out", s(&out)],
        vec!["run", "toll", "--scenario", s(&sc), "--params", "-0.01,540,60", "--out", s(&out)],
        vec!["run", "base", "--scenario", "/nonexistent/s.toml", "--out", s(&out)],
        vec!["run", "base", "--scenario", s(&sc), "--replications", "0", "--out", s(&out)],
        vec!["run", "compare", s(&out)],
        vec!["run", "sideways"],
    ];
    for args in cases {
        let err = single_line_failure(&tcsim(&args));
        assert!(err.starts_with("error"), "{args:?}: {err}");
    }
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[tcs]\nlifetime = 1425.0\n").unwrap();
    let err = single_line_failure(&tcsim(&["run", "base", "--scenario", s(&bad), "--out", s(&out)]));
    assert!(err.contains("lifetime"), "{err}");
}

fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_command_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_scenario(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&tcsim(&[
            "run", "bo", "--scenario", s(&sc), "--iterations", "1", "--emit-transactions", "--out", s(&out),
        ]));
        tree_hashes(&out)
    };
    let (a, b) = (run("one"), run("two"));
    assert!(a.len() >= 6, "{a:?}");
    assert_eq!(a, b);
}
