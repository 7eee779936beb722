use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn mcabsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcabsa"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn evaluate_prints_four_decimals() {
    let eval = fixtures().join("eval");
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let o = mcabsa(&[
        "evaluate",
        "--in",
        s(&eval.join("pred_4_7.json")),
        "--gold",
        s(&eval.join("gold_4_7.json")),
        "--task",
        "1",
        "--out",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().contains("F1 0.5714"), "{out}");
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!((json["sextuple"]["f1"].as_f64().unwrap() - 4.0 / 7.0).abs() < 1e-12);
    assert!(json["identification"].is_object());
    assert!(json["average"].is_number());
}

#[test]
fn evaluate_pred_equal_gold_gives_one() {
    let toy = fixtures().join("toy");
    let o = mcabsa(&[
        "evaluate",
        "--in",
        s(&toy.join("gold_sextuples.json")),
        "--gold",
        s(&toy.join("dataset.json")),
        "--task",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).contains("average F1      1.0000"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn evaluate_task_three_is_usage_error() {
    let eval = fixtures().join("eval");
    let p = s(&eval.join("pred_4_7.json")).to_owned();
    let o = mcabsa(&["evaluate", "--in", &p, "--gold", &p, "--task", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_schema_error_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\n  \"d1\": [\n    {\"holder\": 7}\n  ]\n}\n").unwrap();
    let gold = fixtures().join("eval/gold_4_7.json");
    let o = mcabsa(&[
        "evaluate",
        "--in",
        s(&bad),
        "--gold",
        s(&gold),
        "--task",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.json") && err.contains("line 3"), "{err}");
}

#[test]
fn extract_and_flip_reproduce_golden_files() {
    let toy = fixtures().join("toy");
    let tmp = tempfile::tempdir().unwrap();
    let sx = tmp.path().join("sextuples.json");
    let flips = tmp.path().join("flips.json");
    let config = s(&toy.join("config.json")).to_owned();
    let dataset = s(&toy.join("dataset.json")).to_owned();

    let o = mcabsa(&[
        "extract",
        "--config",
        &config,
        "--in",
        &dataset,
        "--out",
        s(&sx),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        fs::read(&sx).unwrap(),
        fs::read(toy.join("golden/sextuples.json")).unwrap()
    );
    assert!(tmp.path().join("sextuples.json.work/final.jsonl").is_file());

    let o = mcabsa(&[
        "flip",
        "--config",
        &config,
        "--in",
        &dataset,
        "--sextuples",
        s(&sx),
        "--out",
        s(&flips),
        "--concurrency",
        "4",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        fs::read(&flips).unwrap(),
        fs::read(toy.join("golden/flips.json")).unwrap()
    );
}

#[test]
fn caption_command_fills_every_attachment() {
    let toy = fixtures().join("toy");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("captioned.json");
    let o = mcabsa(&[
        "caption",
        "--config",
        s(&toy.join("config.json")),
        "--in",
        s(&toy.join("dataset.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let ds = mcabsa::dialogue::parse_dataset(&fs::read(&out).unwrap()).unwrap();
    let captions: Vec<_> = ds
        .iter()
        .flat_map(|d| d.utterances.iter().flat_map(|u| u.attachments.iter()))
        .map(|a| a.caption.clone().unwrap())
        .collect();
    assert_eq!(captions.len(), 3);
    assert!(captions.iter().any(|c| c.contains("half price")));
}

#[test]
fn cache_stats_and_validate() {
    let toy = fixtures().join("toy");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&fs::read(toy.join("config.json")).unwrap()).unwrap();
    cfg["prompt_dir"] = serde_json::json!(s(&fixtures().join("../prompts")));
    for b in cfg["backends"].as_array_mut().unwrap() {
        let script = toy.join(b["script"].as_str().unwrap());
        b["script"] = serde_json::json!(s(&script));
    }
    cfg["cache_dir"] = serde_json::json!("cache");
    let config = tmp.path().join("config.json");
    fs::write(&config, serde_json::to_vec(&cfg).unwrap()).unwrap();

    let o = mcabsa(&["cache", "stats", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("0 entries"), "{}", stdout(&o));

    let sx = tmp.path().join("sx.json");
    let o = mcabsa(&[
        "extract",
        "--config",
        s(&config),
        "--in",
        s(&toy.join("dataset.json")),
        "--out",
        s(&sx),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = mcabsa(&["cache", "stats", "--config", s(&config)]);
    let entries: usize = stdout(&o)
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(entries > 30, "{entries}");
    assert!(tmp.path().join("cache").is_dir());

    let o = mcabsa(&[
        "validate",
        "--config",
        s(&config),
        "--in",
        s(&toy.join("dataset.json")),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["dialogues"], 5);
    assert_eq!(
        summary["ready_for"],
        serde_json::json!(["caption", "extract", "flip"])
    );
}

#[test]
fn config_and_data_errors_map_to_exit_codes() {
    let toy = fixtures().join("toy");
    let tmp = tempfile::tempdir().unwrap();
    let o = mcabsa(&["validate", "--config", s(&tmp.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"[{"doc_id": "x", "dialogue": [{"utterance_id": 0, "speaker": "A", "text": "hi", "reply_to": 4}]}]"#)
        .unwrap();
    let o = mcabsa(&[
        "validate",
        "--config",
        s(&toy.join("config.json")),
        "--in",
        s(&bad),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = mcabsa(&["extract", "--config", s(&toy.join("config.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exhausted_backend_exits_with_three() {
    let toy = fixtures().join("toy");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&fs::read(toy.join("config.json")).unwrap()).unwrap();
    cfg["prompt_dir"] = serde_json::json!(s(&fixtures().join("../prompts")));
    cfg["backends"] = serde_json::json!([
        {"name": "captioner", "kind": "http_openai_compatible", "base_url": "http://127.0.0.1:9", "model": "m",
         "retry": {"max_attempts": 1, "base_backoff_ms": 1}, "timeout_ms": 500},
        {"name": "reasoner", "kind": "scripted", "script": s(&toy.join("scripts/reasoner.json")), "model": "m"},
        {"name": "e2e_a", "kind": "scripted", "script": s(&toy.join("scripts/e2e_a.json")), "model": "m"},
        {"name": "e2e_b", "kind": "scripted", "script": s(&toy.join("scripts/e2e_b.json")), "model": "m"}
    ]);
    let config = tmp.path().join("config.json");
    fs::write(&config, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("sx.json");
    let o = mcabsa(&[
        "extract",
        "--config",
        s(&config),
        "--in",
        s(&toy.join("dataset.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    // dialogues without attachments still made it through
    let preds: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(preds.get("toy-04").is_some());
    assert!(preds.get("toy-01").is_none());
}
