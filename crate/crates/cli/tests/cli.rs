use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chronoreason_cli::{EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn cli(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chronoreason"))
        .current_dir(workspace())
        .env("RUST_LOG", "error")
        .args(["--config", "demo/config.toml", "--store"])
        .arg(store)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn scripted_runs_are_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let lines = ok(&cli(d.path(), &["run", "--problems", "demo/problems.jsonl"]));
        assert_eq!(lines.lines().count(), 6);
        ok(&cli(d.path(), &["case", "--cases", "demo/cases.jsonl"]));
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(n, _)| n == "dtemp.jsonl"));
    assert!(ta.iter().any(|(n, _)| n.ends_with("c-trauma.events.jsonl")));
    assert_eq!(ta, tb);
}

#[test]
fn unknown_flag_is_a_usage_error_with_synopsis() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["run", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    let out = cli(dir.path(), &["run", "--problems", "demo/problems.jsonl", "--only", "nope"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(EXIT_OK));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["run", "--problems", "demo/missing.jsonl"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    let out = cli(dir.path(), &["replay", "--run-id", "nope-s7"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
}

#[test]
fn replay_reproduces_the_stored_graph() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cli(dir.path(), &["run", "--problems", "demo/problems.jsonl", "--period", "P1"]));
    ok(&cli(dir.path(), &["archive", "--period", "P1"]));
    let stdout = cli(dir.path(), &["replay", "--run-id", "cxr-02-s7"]);
    let stored = fs::read(dir.path().join("graphs/cxr-02-s7.json")).unwrap();
    let mut expected = stored.clone();
    expected.push(b'\n');
    assert_eq!(ok(&stdout).into_bytes(), expected);
    // a different script cannot reproduce it
    let bad = dir.path().join("other.jsonl");
    fs::write(&bad, r#"{"problem_id":"cxr-02","call_index":0,"reason":"other","answer":"A"}"#).unwrap();
    let out = cli(dir.path(), &["--script", bad.to_str().unwrap(), "replay", "--run-id", "cxr-02-s7"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
}

#[test]
fn archive_then_diff_periods() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cli(dir.path(), &["run", "--problems", "demo/problems.jsonl", "--period", "P1"]));
    ok(&cli(
        dir.path(),
        &["--seed", "8", "--clock", "step:3000", "run", "--problems", "demo/problems.jsonl", "--period", "P2"],
    ));
    for p in ["P1", "P2"] {
        ok(&cli(dir.path(), &["archive", "--period", p]));
    }
    assert_eq!(cli(dir.path(), &["archive", "--period", "P1"]).status.code(), Some(EXIT_RUNTIME));
    let text = ok(&cli(dir.path(), &["diff-periods", "--from", "P1", "--to", "P2"]));
    assert!(text.starts_with("P1 -> P2: 3 changed"), "{text}");
    assert!(text.contains("cxr-02  answer A  latency +2000 ms"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&ok(&cli(dir.path(), &["diff-periods", "--from", "P1", "--to", "P2", "--format", "json"])))
            .unwrap();
    assert_eq!(json["changed"].as_array().unwrap().len(), 3);
    let report = ok(&cli(dir.path(), &["report", "--archive", "P2", "--group-by", "dataset"]));
    assert_eq!(report.lines().count(), 3, "{report}");
}

#[test]
fn bench_report_and_charts() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(&cli(dir.path(), &["bench", "--problems", "demo/problems.jsonl", "--group-by", "dataset"]));
    assert!(table.starts_with("dataset"));
    assert_eq!(table.lines().count(), 3);
    let rows = ok(&cli(dir.path(), &["report", "--format", "jsonl"]));
    assert!(rows.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let out = dir.path().join("charts");
    let listed = ok(&cli(dir.path(), &["chart", "--out", out.to_str().unwrap()]));
    assert_eq!(listed.lines().count(), 3);
    assert!(fs::read_to_string(out.join("agents_per_period.svg")).unwrap().starts_with("<svg"));
    ok(&cli(dir.path(), &["chart", "--format", "csv", "--kind", "modality-bars", "--out", out.to_str().unwrap()]));
    assert!(fs::read_to_string(out.join("modality_bars.csv")).unwrap().starts_with("period,modality"));
    assert_eq!(cli(dir.path(), &["report", "--group-by", "colour"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn score_rewards_with_groups() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cli(dir.path(), &["score-rewards", "--input", "demo/rewards.jsonl", "--group-key", "prompt"]));
    let rows: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let totals: Vec<u64> = rows.iter().map(|r| r["reward"]["total"].as_u64().unwrap()).collect();
    // "The answer is B" carries extra words and "atelectasis" is wrong
    assert_eq!(totals, [2, 1, 0, 2, 0]);
    assert!(rows.iter().all(|r| r["advantage"].is_number()));
}

#[test]
fn curate_rewrites_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (kept, train) = (dir.path().join("kept.jsonl"), dir.path().join("train.jsonl"));
    let report = ok(&cli(
        dir.path(),
        &[
            "curate",
            "--input",
            "demo/problems.jsonl",
            "--output",
            kept.to_str().unwrap(),
            "--rewrite",
            "--split-fraction",
            "0.5",
            "--training",
            train.to_str().unwrap(),
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["kept"], 12, "{report}");
    let n = |p: &Path| fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(n(&kept) + n(&train), 12);
    assert_eq!(n(&kept), 6);
    assert!(fs::read_to_string(&kept).unwrap().contains("\"split\""));
}
