use std::fs;
use std::path::Path;
use std::process::Command;

use fedsim::report::read_jsonl;

const BASE: &str = r#"{"dataset":"synthetic","strategy":"fedcg","synthetic_samples_per_class":30,
    "synthetic_test_per_class":10,"partition_scheme":"dominant_class","psi":0.8,
    "num_clients":10,"clients_per_round":3,"local_iters":5,"rounds":4,
    "total_budget_s":50,"eval_every":2}"#;

fn fedsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn run_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("run");
    let res = fedsim(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["rounds.jsonl", "summary.csv", "config_resolved.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let records = read_jsonl(&out.join("rounds.jsonl")).unwrap();
    assert_eq!(records.len(), 5);
    assert_eq!(records[0].round, -1);

    let resolved = fedsim::config::parse_config(&out.join("config_resolved.json")).unwrap();
    let again = fedsim::config::parse_config_with(Path::new(&cfg), &[format!(
        "output_dir={}",
        serde_json::Value::from(out.display().to_string())
    )])
    .unwrap();
    assert_eq!(resolved, again);
}

#[test]
fn same_override_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let res = fedsim(&["run", "--config", &cfg, "--override", "seed=7", "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0));
        outputs.push(fs::read(out.join("rounds.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = dir.path().join("c");
    fedsim(&["run", "--config", &cfg, "--override", "seed=8", "--out", out.to_str().unwrap()]);
    assert_ne!(fs::read(out.join("rounds.jsonl")).unwrap(), outputs[0]);
}

#[test]
fn strategies_share_environment_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let mut traces = Vec::new();
    for s in ["fedcg", "fedavg"] {
        let out = dir.path().join(s);
        let res = fedsim(&["run", "--config", &cfg, "--override", &format!("strategy={s}"), "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0));
        let recs = read_jsonl(&out.join("rounds.jsonl")).unwrap();
        traces.push(recs.into_iter().map(|r| (r.round, r.env_digest)).collect::<Vec<_>>());
    }
    assert_eq!(traces[0][0], traces[1][0]);
    for (k, d) in &traces[1] {
        if let Some((_, d0)) = traces[0].iter().find(|(k0, _)| k0 == k) {
            assert_eq!(d, d0);
        }
    }
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let res = fedsim(&["run", "--config", &cfg, "--override", "clients_per_round=20"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("M ≤ N"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dataset\": ").unwrap();
    let res = fedsim(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn exhausted_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("run");
    let res = fedsim(&[
        "run", "--config", &cfg, "--override", "total_budget_s=1e-9", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let recs = read_jsonl(&out.join("rounds.jsonl")).unwrap();
    assert_eq!(recs.len(), 1);
}

#[test]
fn zero_rounds_gives_only_the_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("run");
    let res = fedsim(&["run", "--config", &cfg, "--override", "rounds=0", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let recs = read_jsonl(&out.join("rounds.jsonl")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].round, -1);
    assert!(recs[0].test_acc.is_some());
}

#[test]
fn partition_preview_prints_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let export = dir.path().join("part.json");
    let res = fedsim(&["partition-preview", "--config", &cfg, "--export", export.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&export).unwrap()).unwrap();
    let map = v.as_object().unwrap();
    assert_eq!(map.len(), 10);
    let total: usize = map.values().map(|rows| rows.as_array().unwrap().len()).sum();
    assert_eq!(total, 300);
}

#[test]
fn compare_reports_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let mut dirs = Vec::new();
    for s in ["fedavg", "fedcg"] {
        let out = dir.path().join(s);
        fedsim(&["run", "--config", &cfg, "--override", &format!("strategy={s}"), "--out", out.to_str().unwrap()]);
        dirs.push(out.display().to_string());
    }
    let res = fedsim(&["compare", &dirs[0], &dirs[1], "--target", "0.05"]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("fedavg") && text.contains("fedcg"));

    let res = fedsim(&["compare", &dirs[0], "--target", "1.5"]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8(res.stdout).unwrap().contains('—'));

    let res = fedsim(&["compare", dir.path().join("missing").to_str().unwrap(), "--target", "0.5"]);
    assert_ne!(res.status.code(), Some(0));
}
