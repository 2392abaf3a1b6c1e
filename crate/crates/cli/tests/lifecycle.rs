use std::fs;
use std::path::Path;

use clap::Parser;
use serde_json::{json, Value};
use shepherd_cli::commands::load_gateway;
use shepherd_cli::{error_json, run, Cli};
use shepherd_core::metrics::read_report_csv;
use shepherd_core::par::Exec;
use shepherd_core::simulator::{build_mocks, generate_trace, preset, GeneratorConfig};

fn cli(args: &[&str]) -> anyhow::Result<Value> {
    let mut full = vec!["shepherd"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full)?)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Synthetic queries, mock scripts and a backends config under `dir`.
fn workspace(dir: &Path, n: usize) {
    let cfg = GeneratorConfig { text_signal: 0.8, ..Default::default() };
    let trace = generate_trace(&preset("gsm8k").unwrap(), n, 11, &cfg, Exec::Parallel).unwrap();
    let (slm, llm) = build_mocks(&trace, Exec::Parallel);
    fs::write(dir.join("slm.json"), serde_json::to_string(slm.script()).unwrap()).unwrap();
    fs::write(dir.join("llm.json"), serde_json::to_string(llm.script()).unwrap()).unwrap();
    let lines: Vec<String> = trace
        .iter()
        .map(|s| json!({ "id": s.query.id, "question": s.query.text(), "answer": s.answer.to_string() }).to_string())
        .collect();
    fs::write(dir.join("queries.jsonl"), lines.join("\n")).unwrap();
    let backends = json!({
        "slm": { "kind": "mock", "model_name": "small", "role": "slm" },
        "llm": { "kind": "mock", "model_name": "large", "role": "llm" },
        "slm_script": "slm.json",
        "llm_script": "llm.json",
    });
    fs::write(dir.join("backends.json"), backends.to_string()).unwrap();
}

#[test]
fn label_train_calibrate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    workspace(d, 400);

    let s = cli(&["label", "--config", &p(d, "backends.json"), "--queries", &p(d, "queries.jsonl"), "--out", &p(d, "data.jsonl"), "--split", "0.6,0.2", "--seed", "3"]).unwrap();
    assert_eq!(s["labeled"], 400);
    let written = s["written"].as_u64().unwrap();
    assert!(written > 300);
    let parts: u64 = ["train", "val", "test"].iter().map(|k| s["splits"][k]["n"].as_u64().unwrap()).sum();
    assert_eq!(parts, written);

    let train = |out: &str| {
        cli(&["train", "--data", &p(d, "data.train.jsonl"), "--val", &p(d, "data.val.jsonl"), "--mode", "reactive", "--out", &p(d, out), "--seed", "5", "--epochs", "6"]).unwrap()
    };
    let a = train("model.json");
    let b = train("model2.json");
    assert_eq!(a["checksum"], b["checksum"]);
    assert_eq!(fs::read(d.join("model.json")).unwrap(), fs::read(d.join("model2.json")).unwrap());

    let c = cli(&["calibrate", "--data", &p(d, "data.val.jsonl"), "--model", &p(d, "model.json"), "--out", &p(d, "policy.json"), "--accuracy-fraction", "0.9"]).unwrap();
    assert!(c["validation_accuracy"].as_f64().unwrap() >= 0.9 * c["llm_validation_accuracy"].as_f64().unwrap() - 1e-12);

    let e = cli(&[
        "evaluate", "--config", &p(d, "backends.json"), "--data", &p(d, "data.test.jsonl"), "--model", &p(d, "model.json"),
        "--policy", &p(d, "policy.json"), "--out", &p(d, "report.csv"), "--outcomes-dir", &p(d, "outcomes"),
    ])
    .unwrap();
    assert_eq!(e["rows"].as_array().unwrap().len(), 4);
    let rows = read_report_csv(fs::File::open(d.join("report.csv")).unwrap()).unwrap();
    let llm = rows.iter().find(|r| r.strategy == "LLM").unwrap();
    assert_eq!(llm.ace, Some(1.0));
    let oracle = rows.iter().find(|r| r.strategy == "Oracle Shep.").unwrap();
    assert!(oracle.cost <= llm.cost);
    assert!(d.join("outcomes/reactive.jsonl").exists());

    let st = cli(&["stats", "--data", &p(d, "data.jsonl")]).unwrap();
    assert_eq!(st["stats"]["n"].as_u64().unwrap(), written);
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let e = cli(&["train", "--data", &p(d, "missing.jsonl"), "--out", &p(d, "m.json")]).unwrap_err();
    assert_eq!(error_json(&e)["error"]["kind"], "missing_input");

    fs::write(d.join("old.jsonl"), r#"{"schema":"shepherd-label/0","x":1}"#).unwrap();
    let e = cli(&["stats", "--data", &p(d, "old.jsonl")]).unwrap_err();
    assert_eq!(error_json(&e)["error"]["kind"], "schema_mismatch");

    let e = cli(&["simulate", "--profile", "gsm8k", "-n", "10", "--strategies", "bogus", "--out", &p(d, "r.csv")]).unwrap_err();
    let j = error_json(&e);
    assert!(j["error"]["message"].as_str().unwrap().contains("bogus"), "{j}");
}

#[test]
fn published_table_reevaluation() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../tables/table1.csv");
    let s = cli(&["evaluate", "--from-paper-table", root.to_str().unwrap()]).unwrap();
    let reactive = s["checks"].as_array().unwrap().iter().find(|c| c["strategy"] == "Reactive Shep.").unwrap();
    assert!((reactive["computed_ace"].as_f64().unwrap() - 1.97).abs() < 0.01);
    let e = cli(&["evaluate", "--from-paper-table", root.to_str().unwrap(), "--tolerance", "0.001"]).unwrap_err();
    assert_eq!(error_json(&e)["error"]["kind"], "tolerance_exceeded");
}

#[test]
fn simulate_writes_report_and_checks_dominance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path(), "report.csv");
    let s = cli(&["simulate", "--profile", "gsm8k", "-n", "600", "--seed", "7", "--strategies", "oracle,reactive,llm_only", "--out", &out]).unwrap();
    assert_eq!(s["dominance"]["passed"], true);
    let rows = read_report_csv(fs::File::open(&out).unwrap()).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["Oracle Shep.", "Reactive Shep.", "LLM"]);
}

#[test]
fn gateway_refuses_to_start_without_model() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    workspace(d, 5);
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(d.join("backends.json")).unwrap()).unwrap();
    cfg["mode"] = json!("reactive");
    cfg["model"] = json!("nope.json");
    fs::write(d.join("gw.json"), cfg.to_string()).unwrap();
    let e = load_gateway(&d.join("gw.json")).err().expect("must refuse");
    assert_eq!(error_json(&e)["error"]["kind"], "startup");

    fs::write(d.join("nope.json"), "{\"schema\":\"shepherd-model/1\"}").unwrap();
    assert!(load_gateway(&d.join("gw.json")).is_err());
}

#[test]
fn config_secrets_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    workspace(d, 5);
    let text = fs::read_to_string(d.join("backends.json")).unwrap().replace("\"small\"", "\"${SHEPHERD_TEST_SLM_NAME}\"");
    fs::write(d.join("backends_env.json"), text).unwrap();
    let args = ["label", "--config", &p(d, "backends_env.json"), "--queries", &p(d, "queries.jsonl"), "--out", &p(d, "o.jsonl")];
    let e = cli(&args).unwrap_err();
    assert!(format!("{e:#}").contains("SHEPHERD_TEST_SLM_NAME"));
    std::env::set_var("SHEPHERD_TEST_SLM_NAME", "small-from-env");
    assert_eq!(cli(&args).unwrap()["labeled"], 5);
}
