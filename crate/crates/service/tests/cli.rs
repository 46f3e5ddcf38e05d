use std::path::Path;
use std::process::Command;

use tlqa_service::cli::{run, Io};

fn run_cli(args: &[&str], input: &str) -> (i32, String, String) {
    let mut inp = input.as_bytes();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(
        std::iter::once("tlqa").chain(args.iter().copied()),
        &mut Io {
            input: &mut inp,
            out: &mut out,
            err: &mut err,
        },
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let bin = env!("CARGO_BIN_EXE_tlqa");
    let none = Command::new(bin).output().unwrap();
    assert_eq!(none.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    let unknown = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(run_cli(&["query"], "").0, 1);
    assert_eq!(run_cli(&["chat", "--config", "x", "--now", "yesterday-ish"], "").0, 1);
    let (code, out, _) = run_cli(&["--help"], "");
    assert_eq!(code, 0);
    assert!(out.contains("gradcheck"));
}

#[test]
fn runtime_errors_exit_2() {
    let (code, _, err) = run_cli(&["ingest", "--data", "/nonexistent.csv", "--schema", "/nonexistent.toml"], "");
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
}

#[test]
fn gradcheck_passes() {
    let (code, out, _) = run_cli(&["gradcheck", "--cases", "4"], "");
    assert_eq!(code, 0);
    assert!(out.contains("max_rel_err="));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, out, err) = run_cli(&["synth", "--out-dir", p(d), "--users", "1", "--days", "8", "--qa-per-category", "4"], "");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("windows=11520"));
    let data = d.join("data.csv");
    let schema = d.join("schema.toml");

    let (code, out, err) = run_cli(&["ingest", "--data", p(&data), "--schema", p(&schema), "--out", p(&d.join("clean.csv"))], "");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("windows=11520") && out.contains("users=user1"));

    std::fs::write(
        d.join("train.toml"),
        "[encoder]\nembed_dim = 16\nhidden = [16]\n[train]\nepochs = 3\nlearning_rate = 0.003\n[similarity]\nhidden = 16\nepochs = 2\n",
    )
    .unwrap();
    let params = d.join("params.scpm");
    let (code, out, err) = run_cli(
        &["pretrain", "--data", p(&data), "--schema", p(&schema), "--config", p(&d.join("train.toml")), "--out", p(&params)],
        "",
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch=")).count(), 3);
    assert!(out.lines().next().unwrap().starts_with("epoch=0 loss="));

    let sim = d.join("sim.scfs");
    let (code, out, err) = run_cli(
        &["train-sim", "--data", p(&data), "--schema", p(&schema), "--params", p(&params), "--config", p(&d.join("train.toml")), "--out", p(&sim)],
        "",
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), "mode=mlp");

    let store = d.join("store.scem");
    let (code, out, err) = run_cli(&["build-store", "--data", p(&data), "--schema", p(&schema), "--params", p(&params), "--out", p(&store)], "");
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), "records=11520");

    let config = d.join("service.toml");
    std::fs::write(&config, "[data]\nparams = \"params.scpm\"\nsimilarity = \"sim.scfs\"\nstore = \"store.scem\"\n").unwrap();
    std::fs::write(
        d.join("spec.json"),
        r#"{"function":"CalculateDuration","contexts":["sleeping"],"scope":{"kind":"relative_span","span":"yesterday"},"per_day":false}"#,
    )
    .unwrap();
    // Tue 2015-09-22 20:00 UTC
    let (code, out, err) = run_cli(
        &["query", "--config", p(&config), "--spec", p(&d.join("spec.json")), "--now", "2015-09-22T20:00:00Z"],
        "",
    );
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("You spent") && lines[0].ends_with("yesterday."));
    let payload: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(payload["kind"], "duration");

    let (code, out, _) = run_cli(
        &["chat", "--config", p(&config), "--now", "1442952000"],
        "How long did I sleep yesterday?\nHow long did I juggle?\n:quit\n",
    );
    assert_eq!(code, 0);
    assert!(out.contains("short: "));
    assert!(out.contains("could not answer"));

    let report = d.join("report.json");
    let (code, out, err) = run_cli(&["eval", "--config", p(&config), "--qa", p(&d.join("qa.jsonl")), "--out", p(&report)], "");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("short_exact"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["records"], 24);
    let (code, _, err) = run_cli(&["eval", "--config", p(&config), "--qa", p(&d.join("qa.jsonl")), "--mode", "llm"], "");
    assert_eq!(code, 2);
    assert!(err.contains("gateway"));
}
