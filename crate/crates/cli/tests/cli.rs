use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn core_data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core").join(rel)
}

fn sim() -> PathBuf {
    core_data("data/sim/mysql8.toml")
}

fn knobtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knobtune"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_TRAIN: &str = "episodes = 3\nsteps_per_episode = 4\npretrain_steps = 50\nseed = 5\n";

/// Trains a small agent into `dir/pool/agent.json`.
fn train(dir: &Path) -> PathBuf {
    let cfg = dir.join("train.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let pool = dir.join("pool");
    std::fs::create_dir_all(&pool).unwrap();
    let out = pool.join("agent.json");
    let hints = core_data("data/sim/mysql8_hints.json");
    ok(&knobtune(&[
        "train",
        "--env",
        s(&sim()),
        "--hints",
        s(&hints),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]));
    out
}

#[test]
fn simulate_is_deterministic() {
    let run = || ok(&knobtune(&["simulate", "--env", s(&sim()), "--seed", "4", "--json"]));
    let first = run();
    assert_eq!(first, run());
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(v.to_string().contains("perf"));
}

#[test]
fn simulate_rejects_unknown_knob() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "no_such_knob = 3\n").unwrap();
    let out = knobtune(&["simulate", "--env", s(&sim()), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_tune_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let agent = train(dir.path());
    for sidecar in [".log.jsonl", ".summary.json", ".timing.json"] {
        assert!(Path::new(&format!("{}{sidecar}", s(&agent))).exists(), "missing {sidecar}");
    }

    let result = dir.path().join("result.json");
    ok(&knobtune(&[
        "tune",
        "--pool",
        s(&dir.path().join("pool")),
        "--env",
        s(&sim()),
        "--budget",
        "3",
        "--out",
        s(&result),
    ]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert!(v["pg_best"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["iterations"].as_array().unwrap().len(), 3);
    assert!(v["agent"].as_str().unwrap().ends_with("agent.json"));

    let csv = dir.path().join("curve.csv");
    let log = format!("{}.log.jsonl", s(&agent));
    ok(&knobtune(&["report", "--train-log", &log, "--out", s(&csv)]));
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let best: Vec<f64> = reader.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert!(!best.is_empty());
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn train_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (train(a.path()), train(b.path()));
    assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap());
    let summary = |p: &Path| std::fs::read(format!("{}.summary.json", s(p))).unwrap();
    assert_eq!(summary(&x), summary(&y));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(knobtune(&["bogus"]).status.code(), Some(2));
    let out = knobtune(&["tune", "--pool", ".", "--env", s(&sim()), "--budget", "0", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_pool_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = knobtune(&[
        "tune",
        "--pool",
        s(dir.path()),
        "--env",
        s(&sim()),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn extract_from_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let set = core_data("tests/fixtures/extract/golden");
    let out = dir.path().join("hints.json");
    let stdout = ok(&knobtune(&[
        "extract",
        "--sources",
        s(&set.join("corpus")),
        "--dbms",
        "mysql",
        "--fixtures",
        s(&set.join("responses")),
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("innodb_log_file_size"));
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(file["hints"].as_array().unwrap().len(), 2);
    assert!(Path::new(&format!("{}.report.json", s(&out))).exists());
}

#[test]
fn extract_without_key_fails_with_llm_error() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = dir.path().join("endpoint.toml");
    std::fs::write(&endpoint, "api_key_env = \"KNOBTUNE_CLI_TEST_UNSET\"\n").unwrap();
    let out = knobtune(&[
        "extract",
        "--sources",
        s(&core_data("tests/fixtures/extract/golden/corpus")),
        "--dbms",
        "mysql",
        "--endpoint",
        s(&endpoint),
        "--out",
        s(&dir.path().join("h.json")),
    ]);
    assert_eq!(out.status.code(), Some(7));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KNOBTUNE_CLI_TEST_UNSET"));
}
