use std::path::Path;
use std::process::{Command, Output};

use etmpc::policy::{FeatureStats, PolicyParams};
use etmpc::rl::expanded_feature_names;
use etmpc::systems::{Pendulum, PendulumConfig};

fn etmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etmpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = etmpc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(file: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(file)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn small_testset(dir: &Path, system: &str, episodes: &str) -> std::path::PathBuf {
    let ts = dir.join(format!("ts-{system}"));
    ok(&[
        "gen-testset",
        "--system",
        system,
        "--seed",
        "3",
        "--episodes",
        episodes,
        "--steps",
        "40",
        "--out",
        path(&ts),
    ]);
    ts
}

#[test]
fn eval_always_recomputes_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let ts = small_testset(tmp.path(), "pendulum", "3");
    assert!(ts.join("testset.json").exists());
    let out = tmp.path().join("eval");
    ok(&[
        "eval",
        "--policy",
        "always",
        "--testset",
        path(&ts),
        "--out",
        path(&out),
    ]);
    let rows = csv_rows(&out.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "always");
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("config.toml").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn compare_writes_one_row_per_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let ts = small_testset(tmp.path(), "pendulum", "2");
    let sys = Pendulum::new(PendulumConfig::default()).unwrap();
    let names = expanded_feature_names(&sys);
    let rl = tmp.path().join("rl.json");
    PolicyParams::initial(FeatureStats::identity(names.len()), names)
        .save(&rl)
        .unwrap();
    let out = tmp.path().join("cmp");
    let policies = format!("always,never,periodic:5,{}", path(&rl));
    ok(&[
        "compare",
        "--policies",
        &policies,
        "--testset",
        path(&ts),
        "--out",
        path(&out),
        "--repeats",
        "2",
    ]);
    let rows = csv_rows(&out.join("compare.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "rl");
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), 0.05);
}

#[test]
fn battery_trace_forecast_matches_truth_at_anchors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("trace");
    ok(&[
        "trace",
        "--system",
        "battery",
        "--policy",
        "periodic:20",
        "--seed",
        "4",
        "--steps",
        "60",
        "--out",
        path(&out),
    ]);
    for f in ["episode.jsonl", "trace.csv", "market.csv", "forecast.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = csv_rows(&out.join("forecast.csv"));
    assert_eq!(rows.len(), 60);
    let anchors: Vec<&Vec<String>> = rows.iter().filter(|r| r[6] == "1").collect();
    assert_eq!(anchors.len(), 3);
    for r in anchors {
        assert_eq!(r[0], r[5], "anchor column at a recompute");
        assert_eq!(r[1], r[3], "production at step {}", r[0]);
        assert_eq!(r[2], r[4], "price at step {}", r[0]);
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(etmpc(&["eval", "--bogus"]).status.code(), Some(1));
    let missing = tmp.path().join("nowhere");
    let out = etmpc(&["eval", "--policy", "always", "--testset", path(&missing)]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        etmpc(&["eval", "--policy", "sometimes", "--testset", path(&missing)])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(etmpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn hash_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let ts = small_testset(tmp.path(), "pendulum", "1");
    let cfg = tmp.path().join("other.toml");
    std::fs::write(&cfg, "[pendulum]\ncompute_cost = 0.001\n").unwrap();
    let out = etmpc(&[
        "--config",
        path(&cfg),
        "eval",
        "--policy",
        "always",
        "--testset",
        path(&ts),
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn written_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ts = small_testset(tmp.path(), "pendulum", "2");
    let first = tmp.path().join("first");
    ok(&[
        "eval",
        "--policy",
        "periodic:3",
        "--testset",
        path(&ts),
        "--out",
        path(&first),
    ]);
    let second = tmp.path().join("second");
    let cfg = first.join("config.toml");
    ok(&[
        "--config",
        path(&cfg),
        "eval",
        "--policy",
        "periodic:3",
        "--testset",
        path(&ts),
        "--out",
        path(&second),
    ]);
    for f in ["eval.csv", "eval_episodes.csv", "eval.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}
