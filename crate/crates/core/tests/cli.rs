mod common;

use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interlocutor")).args(args).current_dir(common::flows_dir()).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn validate_exit_codes() {
    let ok = cli(&["validate", "--flow", "weather_travel.json"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("ok: weather_travel"));

    let dir = tempfile::tempdir().unwrap();
    let budgeted = dir.path().join("budgeted.json");
    std::fs::write(
        &budgeted,
        r#"{"id": "d", "version": "1", "mode": "structured", "languages": ["en"],
            "nodes": [{"id": "a", "kind": "open", "template": "Why?", "max_clarifications": 2, "default_target": "END"}]}"#,
    )
    .unwrap();
    let bad = cli(&["validate", "--flow", budgeted.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("max_clarifications"));

    let dangling = dir.path().join("dangling.json");
    std::fs::write(
        &dangling,
        r#"{"id": "d", "version": "1", "mode": "structured", "languages": ["en"],
            "nodes": [{"id": "a", "kind": "open", "template": "Why?", "default_target": "zzz"}]}"#,
    )
    .unwrap();
    assert_eq!(cli(&["validate", "--flow", dangling.to_str().unwrap()]).status.code(), Some(2));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"id\": ").unwrap();
    assert_eq!(cli(&["validate", "--flow", broken.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cli(&["validate", "--flow", "missing.json"]).status.code(), Some(2));
}

#[test]
fn run_matches_golden_and_is_repeatable() {
    let args = ["run", "--flow", "expert_interview.json", "--script", "expert_interview.script.json", "--seed", "7"];
    let a = cli(&args);
    let b = cli(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a), common::read("expert_interview.golden.txt"));
    let stderr = String::from_utf8_lossy(&a.stderr);
    assert!(stderr.contains("calls=14"), "{stderr}");
}

#[test]
fn run_fails_when_script_runs_short() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.json");
    let mut fx: Vec<serde_json::Value> = serde_json::from_str(&common::read("expert_interview.script.json")).unwrap();
    let first = fx.iter().position(|e| e["role"] == "participant").unwrap();
    fx.truncate(first + 3);
    std::fs::write(&short, serde_json::to_string(&fx).unwrap()).unwrap();
    let out = cli(&["run", "--flow", "expert_interview.json", "--script", short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tokens_extracted_is_cheaper() {
    let out = cli(&["tokens", "--flow", "expert_interview.json", "--script", "expert_interview.script.json", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("turn,full,extracted"));
    let total: Vec<u64> = text.lines().last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(total[1] < total[0], "{text}");
    let rows: Vec<Vec<u64>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("total"))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().map(|r| r[1]).sum::<u64>(), total[0]);
    assert_eq!(rows.iter().map(|r| r[2]).sum::<u64>(), total[1]);
}

#[test]
fn simulate_table_and_json() {
    let table = cli(&["simulate", "--flow", "weather_travel.json", "--personas", "personas.json", "--n", "2"]);
    assert!(table.status.success());
    let text = stdout(&table);
    assert!(text.starts_with("persona"));
    assert_eq!(text.lines().count(), 6);

    let json = cli(&["simulate", "--flow", "weather_travel.json", "--personas", "personas.json", "--n", "2", "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 8);
    assert_eq!(report["overall_completion_rate"], 1.0);
}

#[test]
fn sensitivity_plan_runs() {
    let out = cli(&["sensitivity", "--plan", "expert_interview.plan.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for variant in ["baseline_repeat", "reworded_q2", "strict_judge", "statement_q1"] {
        assert!(text.contains(variant), "{variant} missing");
    }
}

#[test]
fn export_from_store_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["export", "--store", dir.path().to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 1);
    let empty = cli(&["export", "--store", dir.path().to_str().unwrap(), "--format", "jsonl"]);
    assert_eq!(stdout(&empty), "");

    let file = dir.path().join("plain.txt");
    std::fs::write(&file, "x").unwrap();
    assert_eq!(cli(&["export", "--store", file.to_str().unwrap(), "--format", "csv"]).status.code(), Some(2));
}
