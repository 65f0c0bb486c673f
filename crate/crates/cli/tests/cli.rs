use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn mrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrag")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.root.join(name), text).unwrap();
        self.path(name)
    }
}

/// Three pairs: one answerable without retrieval, one needing the visual KB,
/// one needing the textual KB.
fn mock_fixture(ws: &Workspace) -> String {
    ws.write(
        "visual.jsonl",
        concat!(
            r#"{"id":"v1","modality":"visual","text":"which tower in the photo is painted red","image_path":"img/v1.jpg"}"#,
            "\n",
            r#"{"id":"v2","modality":"visual","text":"a tray of pastries in a bakery window","image_path":"img/v2.jpg"}"#,
            "\n"
        ),
    );
    ws.write(
        "textual.jsonl",
        concat!(
            r#"{"id":"t1","modality":"textual","text":"in what year did the canal first open to barges"}"#,
            "\n",
            r#"{"id":"t2","modality":"textual","text":"railway timetables for the winter season"}"#,
            "\n"
        ),
    );
    ws.write(
        "qa.jsonl",
        concat!(
            r#"{"id":"q1","question":"what is the capital of france","golds":["paris"],"parametric":true}"#,
            "\n",
            r#"{"id":"q2","question":"which tower in the photo is painted red","golds":["the north tower"],"gold_doc_ids":{"visual":["v1"],"textual":[]},"parametric":false}"#,
            "\n",
            r#"{"id":"q3","question":"in what year did the canal first open to barges","golds":["1822"],"gold_doc_ids":{"visual":[],"textual":["t1"]},"parametric":false}"#,
            "\n"
        ),
    );
    for m in ["visual", "textual"] {
        let o = mrag(&[
            "index",
            "build",
            "--kb",
            &ws.path(&format!("{m}.jsonl")),
            "--modality",
            m,
            "--output",
            &ws.path(&format!("{m}.idx")),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    ws.write(
        "run.toml",
        &format!(
            "seed = 9\nmetric = \"em\"\n[paths]\nvisual_kb = {:?}\ntextual_kb = {:?}\nvisual_index = {:?}\ntextual_index = {:?}\nqaset = {:?}\n",
            ws.path("visual.jsonl"),
            ws.path("textual.jsonl"),
            ws.path("visual.idx"),
            ws.path("textual.idx"),
            ws.path("qa.jsonl"),
        ),
    )
}

#[test]
fn search_on_single_document_index_returns_it() {
    let ws = Workspace::new();
    let kb = ws.write("kb.jsonl", "{\"id\":\"only\",\"modality\":\"textual\",\"text\":\"a lone passage\"}\n");
    let idx = ws.path("kb.idx");
    assert!(mrag(&["index", "build", "--kb", &kb, "--modality", "textual", "--output", &idx]).status.success());
    let o = mrag(&["--k", "1", "search", "--index", &idx, "--query", "something else entirely"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1\tonly\t"), "{lines:?}");
}

#[test]
fn index_info_reports_manifest() {
    let ws = Workspace::new();
    let kb = ws.write(
        "kb.jsonl",
        "{\"id\":\"a\",\"modality\":\"textual\",\"text\":\"x y z\"}\n{\"id\":\"b\",\"modality\":\"textual\",\"text\":\"p q r\"}\n",
    );
    let idx = ws.path("kb.idx");
    assert!(mrag(&["index", "build", "--kb", &kb, "--modality", "textual", "--output", &idx]).status.success());
    let o = mrag(&["index", "info", "--index", &idx]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["count"], 2, "{v}");
}

#[test]
fn errors_are_one_line_with_kind() {
    let ws = Workspace::new();
    let kb = ws.write(
        "dup.jsonl",
        "{\"id\":\"a\",\"modality\":\"textual\",\"text\":\"one\"}\n{\"id\":\"a\",\"modality\":\"textual\",\"text\":\"two\"}\n",
    );
    let o = mrag(&["kb", "stats", "--input", &kb, "--modality", "textual"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: duplicate_id: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn usage_errors_exit_two() {
    let o = mrag(&["search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage: "));
    assert!(mrag(&["--help"]).status.success());
}

#[test]
fn stochastic_commands_need_a_seed() {
    let ws = Workspace::new();
    let data = ws.write("r.jsonl", "{\"question\":\"q\",\"label\":\"NA\"}\n");
    let o = mrag(&["router", "train", "--data", &data, "--output", &ws.path("m.bin")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.write("c.toml", "kk = 3\n");
    let o = mrag(&["--config", &cfg, "ir-metrics", "--run", "x", "--qrels", "y"]);
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
}

#[test]
fn compare_lists_every_fixed_strategy_and_the_router() {
    let ws = Workspace::new();
    let cfg = mock_fixture(&ws);
    let routes = ws.write(
        "routes.jsonl",
        concat!(
            "{\"question\":\"what is the capital of france\",\"label\":\"NA\"}\n",
            "{\"question\":\"which tower in the photo is painted red\",\"label\":\"Visual\"}\n",
            "{\"question\":\"in what year did the canal first open to barges\",\"label\":\"Textual\"}\n",
        ),
    );
    let model = ws.path("router.bin");
    let o = mrag(&["--config", &cfg, "router", "train", "--data", &routes, "--output", &model, "--epochs", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = ws.path("compare.json");
    let o = mrag(&["--config", &cfg, "--router-model", &model, "pipeline", "compare", "--report", &report]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["strategy"].as_str().unwrap()).collect();
    assert_eq!(names, ["NA", "Visual", "Textual", "router"]);
    // Each fixed strategy answers exactly one of the three pairs.
    for r in &rows[..3] {
        assert!((r["overall"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12, "{r}");
    }
    assert_eq!(rows[3]["overall"].as_f64().unwrap(), 1.0);
    assert_eq!(rows[0]["retrieval_calls"], 0);
    assert_eq!(rows[3]["retrieval_calls"], 2);
    assert!(stdout(&o).starts_with("strategy"));
}

#[test]
fn answer_with_override_skips_retrieval() {
    let ws = Workspace::new();
    let cfg = mock_fixture(&ws);
    let o = mrag(&["--config", &cfg, "pipeline", "answer", "--query", "what is the capital of france", "--decision", "na"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(trace["retrieval_calls"], 0);
    assert_eq!(trace["retrieved"].as_array().unwrap().len(), 0);
    assert_eq!(trace["response"], "paris");
    assert_eq!(trace["decision_source"], "override");
}

#[test]
fn windsock_labels_follow_the_mock() {
    let ws = Workspace::new();
    let cfg = mock_fixture(&ws);
    let out = ws.path("windsock.jsonl");
    let ledger = ws.path("ledger.jsonl");
    let o = mrag(&["--config", &cfg, "curate", "windsock", "--output", &out, "--ledger", &ledger]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels: Vec<String> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["label"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(labels, ["NA", "Visual", "Textual"]);
    assert_eq!(fs::read_to_string(&ledger).unwrap().lines().count(), 3);
}

#[test]
fn ir_metrics_on_trec_files() {
    let ws = Workspace::new();
    let run = ws.write("r.run", "q1 Q0 d1 1 3.0 x\nq1 Q0 d2 2 2.0 x\nq1 Q0 d3 3 1.0 x\n");
    let qrels = ws.write("q.qrels", "q1 0 d3 1\n");
    let o = mrag(&["--k", "5", "ir-metrics", "--run", &run, "--qrels", &qrels]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["mrr"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["recall"].as_f64().unwrap(), 1.0);
}

#[test]
fn eval_score_averages_predictions() {
    let ws = Workspace::new();
    let preds = ws.write(
        "p.jsonl",
        "{\"id\":\"a\",\"prediction\":\"The cat\",\"golds\":[\"cat\"]}\n{\"id\":\"b\",\"prediction\":\"dog\",\"golds\":[\"cat\"]}\n",
    );
    let o = mrag(&["--metric", "em", "eval", "score", "--predictions", &preds]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mean"].as_f64().unwrap(), 0.5, "{v}");
}

