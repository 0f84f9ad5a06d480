//! The `copa` binary, driven as a user would drive it.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn copa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_copa"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Action lines of the demo log, without the replay envelope.
fn demo_actions(dir: &Path) -> PathBuf {
    let log = std::fs::read_to_string(fixtures().join("demo/session.log.jsonl")).unwrap();
    let mut text = String::new();
    for line in log.lines() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        if v["type"] == "action" {
            v.as_object_mut().unwrap().remove("type");
            text += &format!("{v}\n");
        }
    }
    let path = dir.join("actions.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn expert_fixtures_score_full_mastery() {
    for task in ["truck-constant-velocity", "truck-acceleration", "drone-2d"] {
        let file = fixtures().join("experts").join(format!("{task}.json"));
        let out = ok(copa().args(["score", "--task", task]).arg(&file).output().unwrap());
        assert_eq!(out.lines().last(), Some("mastery 1.000"), "{task}: {out}");
    }
}

#[test]
fn scoring_an_action_log_prints_a_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let actions = demo_actions(dir.path());
    let out = ok(copa().args(["score", "--task", "truck-constant-velocity"]).arg(&actions).output().unwrap());
    let lines: Vec<&str> = out.lines().collect();
    let (last, timeline) = lines.split_last().unwrap();
    assert!(timeline.len() >= 5);
    let values: Vec<f64> = timeline.iter().map(|l| serde_json::from_str::<Value>(l).unwrap()["value"].as_f64().unwrap()).collect();
    assert_eq!(*last, format!("mastery {:.3}", values.last().unwrap()));
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn replay_writes_identical_files_each_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(copa()
            .arg("replay")
            .arg("--script")
            .arg(fixtures().join("demo/dialogue.script.jsonl"))
            .arg("--log")
            .arg(fixtures().join("demo/session.log.jsonl"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["traces.jsonl", "sessions.jsonl"] {
        let (x, y) = (std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file}");
    }
    assert_eq!(std::fs::read_to_string(a.join("traces.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn synth_piped_into_rq1_shows_the_adaptive_signs() {
    let synth = copa()
        .args(["synth", "--profile", "improving", "--dyads", "30", "--seed", "7"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let analyze = copa()
        .args(["analyze", "rq1", "--sessions", "-"])
        .stdin(synth.stdout.unwrap())
        .output()
        .unwrap();
    let report: Value = serde_json::from_str(&ok(analyze)).unwrap();
    let rho = |policy: &str| {
        report["policies"].as_array().unwrap().iter().find(|p| p["policy"] == policy).unwrap()["correlation"]["rho"]
            .as_f64()
            .unwrap()
    };
    assert!(rho("PROBE_UNDERSTANDING") < 0.0);
    assert!(rho("SUGGEST_ACTION") > 0.0);
    assert!(rho("PUSH_LIMIT") > 0.0);
}

#[test]
fn rules_check_accepts_the_bundled_table_and_rejects_garbage() {
    let out = copa().args(["rules", "check"]).arg(fixtures().join("policy_rules.json")).output().unwrap();
    assert!(!ok(out).is_empty());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "rules": [{"id": "x", "policy": "SHOUT"}]}"#).unwrap();
    let out = copa().args(["rules", "check"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn ingest_persists_sessions_into_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let actions = demo_actions(dir.path());
    let data = dir.path().join("data");
    let out = ok(copa().arg("ingest").arg(&actions).arg("--data-dir").arg(&data).output().unwrap());
    assert!(out.contains("demo01-s001"), "{out}");
    assert!(data.join("snapshots/learners.json").exists());

    let config = copa_service::config::ServiceConfig { data_dir: data.clone(), ..Default::default() };
    let persist = copa_service::store::Persistent::open(&config).unwrap();
    let records = persist.engine.records().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].mastery_timeline.len(), 1 + 8);
    drop(persist);

    // Ingesting the same file again leaves the closed session alone.
    let again = ok(copa().arg("ingest").arg(&actions).arg("--data-dir").arg(&data).output().unwrap());
    assert!(again.contains("already closed"), "{again}");
}
