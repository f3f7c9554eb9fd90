use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hardy-signal"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn temp_file(name: &str, contents: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hardy-signal-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

#[test]
fn predict_e3_marginal() {
    let out = bin().args(["predict", "e3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("red marginal: C+ 0.833333333333 = 5/6, D+ 0.166666666667 = 1/6"));
}

#[test]
fn predict_e1_forbidden() {
    let out = bin().args(["predict", "e1"]).output().unwrap();
    assert!(stdout(&out).contains("forbidden: (D+,V-)"));
}

#[test]
fn predict_h_thirds() {
    let text = stdout(&bin().args(["predict", "h"]).output().unwrap());
    for pair in ["(U+,V-)", "(V+,U-)", "(V+,V-)"] {
        assert!(text.contains(&format!("  {pair} 0.333333333333 = 1/3")), "{text}");
    }
}

#[test]
fn predict_unknown_selector_fails() {
    let out = bin().args(["predict", "e9"]).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn simulate_clash_row() {
    let out = bin()
        .args(["simulate", "--scenario"])
        .arg(scenario("identity_clash.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let row = text.lines().find(|l| l.trim_start().starts_with("clash_rate")).unwrap();
    assert!(row.contains("oracle=0.111111"), "{row}");
    assert!(row.contains("empirical=0.11"), "{row}");
}

#[test]
fn simulate_expected_deadlock_exits_zero() {
    let out = bin()
        .args(["simulate", "--trials", "2000", "--scenario"])
        .arg(scenario("deadlock_v1.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("deadlock: true"));
}

#[test]
fn simulate_unexpected_deadlock_exits_three() {
    let spec = temp_file("v1_single.json", r#"{"kind": "single_config", "config": "h", "version": "v1"}"#);
    let out = bin().args(["simulate", "--trials", "500", "--scenario"]).arg(spec).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_e1_fidelity_json() {
    let report = temp_file("e1_report.json", "");
    let out = bin()
        .args(["simulate", "--format", "json", "--scenario"])
        .arg(scenario("single_config_e1.json"))
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["tvd_vs_quantum"].as_f64().unwrap() < 0.005);
    assert_eq!(json["trials"], 1_000_000);
}

#[test]
fn simulate_csv_has_outcome_and_rate_rows() {
    let out = bin()
        .args(["simulate", "--format", "csv", "--trials", "1000", "--scenario"])
        .arg(scenario("double_pair_untagged.json"))
        .output()
        .unwrap();
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("outcome,")).count(), 8);
    assert_eq!(text.lines().filter(|l| l.starts_with("rate,")).count(), 5);
}

#[test]
fn overrides_win_and_repeat() {
    let run = || {
        bin()
            .args(["simulate", "--format", "json", "--trials", "3000", "--seed", "99", "--pairing-rule", "random", "--identity-mode", "none", "--scenario"])
            .arg(scenario("double_pair_tagged.json"))
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.stdout, b.stdout);
    let json: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(json["seed"], 99);
    assert_eq!(json["strategy"]["pairing_rule"], "random");
}

#[test]
fn bad_inputs_exit_one() {
    let garbage = temp_file("garbage.json", "{ not json");
    let unknown = temp_file("unknown.json", r#"{"kind": "clash_s7", "colour": "red"}"#);
    for path in [garbage, unknown] {
        let out = bin().args(["simulate", "--scenario"]).arg(path).output().unwrap();
        assert_eq!(out.status.code(), Some(1));
    }
    let out = bin()
        .args(["simulate", "--leader-rule", "loudest", "--scenario"])
        .arg(scenario("identity_clash.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin()
        .args(["simulate", "--identity-mode", "none", "--pairing-rule", "by_identity", "--scenario"])
        .arg(scenario("single_config_e1.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
