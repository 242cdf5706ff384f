use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CORPUS: &str = include_str!("../demo/corpus.jsonl");
const QRELS: &str = include_str!("../demo/qrels.txt");
const SCRIPT: &str = include_str!("../demo/script.json");

fn smr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smr"))
        .args(args)
        .env_remove("SMR_API_KEY")
        .output()
        .expect("spawn smr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
        fs::write(dir.path().join("qrels.txt"), QRELS).unwrap();
        fs::write(dir.path().join("script.json"), SCRIPT).unwrap();
        fs::write(
            dir.path().join("queries.jsonl"),
            "{\"query_id\": \"q1\", \"text\": \"LLM definition\"}\n{\"query_id\": \"q2\", \"text\": \"weeknight dinner\"}\n",
        )
        .unwrap();
        let ws = Self { dir };
        let out = smr(&["index", "--corpus", p(&ws.path("corpus.jsonl")), "--out", p(&ws.path("index.json"))]);
        assert!(out.status.success(), "{}", stderr(&out));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, llm: serde_json::Value, tag: &str) -> PathBuf {
        let cfg = serde_json::json!({
            "retriever": {"bm25": {"index": "index.json"}},
            "llm": llm,
            "paths": {
                "queries": "queries.jsonl",
                "run": format!("{tag}/run.jsonl"),
                "trace": format!("{tag}/trace.jsonl"),
            }
        });
        let path = self.path(name);
        fs::write(&path, cfg.to_string()).unwrap();
        path
    }

    fn scripted(&self, tag: &str) -> PathBuf {
        self.config(&format!("{tag}.json"), serde_json::json!({"script": {"path": "script.json"}}), tag)
    }
}

#[test]
fn index_reports_doc_count() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{\"doc_id\":\"a\",\"text\":\"x y\"}\n{\"doc_id\":\"b\",\"text\":\"y z\"}\n{\"doc_id\":\"c\",\"text\":\"z\"}\n").unwrap();
    let out = smr(&["index", "--corpus", p(&corpus), "--out", p(&dir.path().join("i.json"))]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("doc_count=3"));
    assert!(stdout(&out).contains("avg_doc_length="));
}

#[test]
fn index_cites_malformed_line() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{\"doc_id\":\"a\",\"text\":\"x\"}\n{not json\n").unwrap();
    let out = smr(&["index", "--corpus", p(&corpus), "--out", p(&dir.path().join("i.json"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn index_rejects_empty_corpus() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "").unwrap();
    let out = smr(&["index", "--corpus", p(&corpus), "--out", p(&dir.path().join("i.json"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}

#[test]
fn scripted_run_is_byte_identical_across_repeats() {
    let ws = Workspace::new();
    for tag in ["a", "b"] {
        let out = smr(&["run", "--config", p(&ws.scripted(tag))]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("policy-stop"));
        assert!(stdout(&out).contains("total_output_tokens=34"));
    }
    for f in ["run.jsonl", "trace.jsonl"] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn missing_api_key_names_the_variable() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "ep.json",
        serde_json::json!({"endpoint": {"url": "http://127.0.0.1:9/v1", "model": "m"}}),
        "ep",
    );
    let out = smr(&["run", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("SMR_API_KEY"), "{}", stderr(&out));
    assert!(!ws.path("ep/run.jsonl").exists());
}

#[test]
fn unreachable_endpoint_fails_before_any_query() {
    let ws = Workspace::new();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ws.config(
        "ep.json",
        serde_json::json!({"endpoint": {"url": format!("http://127.0.0.1:{port}/v1/chat/completions"), "model": "m"}}),
        "ep",
    );
    let out = Command::new(env!("CARGO_BIN_EXE_smr"))
        .args(["run", "--config", p(&cfg)])
        .env("SMR_API_KEY", "k")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("preflight"), "{}", stderr(&out));
    assert!(!ws.path("ep/run.jsonl").exists());
    assert!(!ws.path("ep/trace.jsonl").exists());
}

#[test]
fn max_steps_override_caps_trajectories() {
    let ws = Workspace::new();
    let script = serde_json::json!({
        "default": (0..10)
            .map(|i| format!("{{\"action\": \"refine query\", \"refined_query\": \"llm variant{i}\"}}"))
            .collect::<Vec<_>>()
    });
    fs::write(ws.path("script.json"), script.to_string()).unwrap();
    let out = smr(&["run", "--config", p(&ws.scripted("cap")), "--max-steps", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(ws.path("cap/trace.jsonl")).unwrap();
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["record"] == "summary" {
            assert!(v["transitions"].as_u64().unwrap() <= 2);
            assert_eq!(v["stop_cause"], "step-cap");
        }
    }
}

#[test]
fn config_with_two_llm_modes_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "bad.json",
        serde_json::json!({"script": {"path": "script.json"}, "endpoint": {"url": "u", "model": "m"}}),
        "bad",
    );
    let out = smr(&["run", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("exactly one"), "{}", stderr(&out));
}

fn scripted_run(ws: &Workspace) -> PathBuf {
    let out = smr(&["run", "--config", p(&ws.scripted("r"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    ws.path("r")
}

#[test]
fn eval_prints_all_three_metrics() {
    let ws = Workspace::new();
    let dir = scripted_run(&ws);
    let report = ws.path("eval.json");
    let csv = ws.path("eval.csv");
    let out = smr(&[
        "eval", "--run", p(&dir.join("run.jsonl")), "--qrels", p(&ws.path("qrels.txt")),
        "--metrics", "ndcg@10,map@10,recall@10", "--out", p(&report),
        "--trace", p(&dir.join("trace.jsonl")), "--csv", p(&csv),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for m in ["ndcg@10", "map@10", "recall@10"] {
        assert!(text.contains(m), "{text}");
    }
    assert!(text.contains("1.0000"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["aggregate"]["ndcg@10"], 1.0);
    assert_eq!(v["excluded_count"], 0);
    assert_eq!(v["action_histogram"]["refine"], 1);
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("query_id,ndcg@10,map@10,recall@10,steps,output_tokens"));
}

#[test]
fn eval_lists_query_missing_from_qrels() {
    let ws = Workspace::new();
    let dir = scripted_run(&ws);
    fs::write(ws.path("q1only.txt"), "q1 0 d3 2\nq1 0 d4 1\n").unwrap();
    let report = ws.path("eval.json");
    let out = smr(&[
        "eval", "--run", p(&dir.join("run.jsonl")), "--qrels", p(&ws.path("q1only.txt")),
        "--metrics", "ndcg@10", "--out", p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["excluded_count"], 1);
    assert_eq!(v["excluded"][0]["query_id"], "q2");
}

#[test]
fn eval_rejects_unknown_metric() {
    let ws = Workspace::new();
    let dir = scripted_run(&ws);
    let out = smr(&[
        "eval", "--run", p(&dir.join("run.jsonl")), "--qrels", p(&ws.path("qrels.txt")),
        "--metrics", "p@5", "--out", p(&ws.path("e.json")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn inspect_prints_steps_in_order_with_token_footer() {
    let ws = Workspace::new();
    let dir = scripted_run(&ws);
    let out = smr(&["inspect", "--trace", p(&dir.join("trace.jsonl")), "--query-id", "q1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let refine = text.find("step 1  refine").expect("refine block");
    let rerank = text.find("step 2  rerank").expect("rerank block");
    let stop = text.find("step 3  stop").expect("stop block");
    assert!(refine < rerank && rerank < stop);
    let tokens: u64 = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("tokens:"))
        .map(|r| r.split_whitespace().next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert!(text.contains(&format!("total output tokens: {tokens}")), "{text}");
    assert!(text.contains(&format!("sum of step tokens: {tokens}")));
}

#[test]
fn inspect_unknown_id_lists_available() {
    let ws = Workspace::new();
    let dir = scripted_run(&ws);
    let out = smr(&["inspect", "--trace", p(&dir.join("trace.jsonl")), "--query-id", "zz"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("q1") && err.contains("q2"), "{err}");
}
