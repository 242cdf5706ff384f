mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use smr_core::engine::{emit_result_trace, read_queries_file, read_run_file, read_trace, write_run_file, TraceRecord};
use smr_core::evalx::{analyze_trace_reader, evaluate, parse_metrics, EvalReport, Qrels};
use smr_core::llm::{HttpBackend, HttpConfig, LlmError, ScriptedBackend};
use smr_core::retrieval::{
    read_corpus_jsonl, read_embeddings_jsonl, CorpusIndex, DenseRetriever, DenseStore, HttpEmbedder, Retriever,
};
use smr_core::{Engine, Query, TokenizerConfig};

use config::{LlmConfig, RetrieverConfig, RunConfig, ScriptFile, DEFAULT_KEY_ENV};

#[derive(Parser)]
#[command(name = "smr", version, about = "State-machine reasoning over retrieval results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a JSONL corpus of {"doc_id", "text"} records.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch of queries and write run and trace files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a run file against TREC qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value = "ndcg@10,map@10,recall@10")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        /// Trace file for the action histogram and depth bins.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write per-query scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print one query's trajectory from a trace file.
    Inspect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        query_id: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index { corpus, out } => cmd_index(&corpus, &out),
        Command::Run {
            config,
            max_steps,
            k,
            batch_size,
        } => cmd_run(&config, max_steps, k, batch_size),
        Command::Eval {
            run,
            qrels,
            metrics,
            out,
            trace,
            csv,
        } => cmd_eval(&run, &qrels, &metrics, &out, trace.as_deref(), csv.as_deref()),
        Command::Inspect { trace, query_id } => cmd_inspect(&trace, &query_id),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_index(corpus: &Path, out: &Path) -> Result<()> {
    let docs = read_corpus_jsonl(open(corpus)?).with_context(|| format!("{}", corpus.display()))?;
    let index = CorpusIndex::build(docs, TokenizerConfig::default()).with_context(|| format!("{}", corpus.display()))?;
    let mut w = create(out)?;
    w.write_all(index.to_json().as_bytes())?;
    w.flush()?;
    println!("doc_count={}", index.doc_count());
    println!("avg_doc_length={:.4}", index.avg_doc_length());
    Ok(())
}

fn api_key(var: &str) -> Result<String> {
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => bail!("environment variable {var} is not set; it must hold the endpoint API key"),
    }
}

fn load_retriever(cfg: &RetrieverConfig) -> Result<Box<dyn Retriever>> {
    match cfg {
        RetrieverConfig::Bm25 { index } => {
            let text = std::fs::read_to_string(index).with_context(|| format!("reading {}", index.display()))?;
            let idx = CorpusIndex::from_json(&text).with_context(|| format!("{}", index.display()))?;
            Ok(Box::new(idx))
        }
        RetrieverConfig::Dense {
            store,
            corpus,
            embed_endpoint,
            model,
            api_key_env,
        } => {
            let vectors = read_embeddings_jsonl(open(store)?).with_context(|| format!("{}", store.display()))?;
            let store_ = DenseStore::new(vectors, Some(embed_endpoint.clone()))
                .with_context(|| format!("{}", store.display()))?;
            let docs = read_corpus_jsonl(open(corpus)?).with_context(|| format!("{}", corpus.display()))?;
            let key = match api_key_env {
                Some(var) => Some(api_key(var)?),
                None => std::env::var(DEFAULT_KEY_ENV).ok(),
            };
            let embedder = HttpEmbedder::new(embed_endpoint, model, key)?;
            Ok(Box::new(DenseRetriever::new(store_, docs, Box::new(embedder))?))
        }
    }
}

fn cmd_run(path: &Path, max_steps: Option<usize>, k: Option<usize>, batch_size: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let mut engine_cfg = cfg.engine.clone();
    if let Some(v) = max_steps {
        engine_cfg.max_steps = v;
    }
    if let Some(v) = k {
        engine_cfg.k = v;
    }
    if let Some(v) = batch_size {
        engine_cfg.batch_size = v;
    }
    let mut engine = Engine::new(engine_cfg)?;
    if let Some(p) = &cfg.prompt_path {
        let prompt = std::fs::read_to_string(p).with_context(|| format!("reading prompt {}", p.display()))?;
        engine = engine.with_policy_prompt(prompt);
    }

    // Cheap checks first: credentials and local files before any network use.
    let backend = match &cfg.llm {
        LlmConfig::Endpoint { url, model, api_key_env } => {
            let key = api_key(api_key_env)?;
            Backend::Http(HttpBackend::new(HttpConfig::new(url, model, Some(key)))?)
        }
        LlmConfig::Script { path } => Backend::Script(ScriptFile::load(path)?),
    };
    let retriever = load_retriever(&cfg.retriever)?;
    let queries = read_queries_file(&cfg.paths.queries)?;
    if queries.is_empty() {
        bail!("{}: no queries", cfg.paths.queries.display());
    }

    let results = match backend {
        Backend::Http(mut http) => {
            http.preflight()
                .map_err(|e| anyhow!("endpoint preflight failed, no queries were run: {e}"))?;
            engine.run_batch(&queries, retriever.as_ref(), |_| Ok(http.clone()))
        }
        Backend::Script(file) => engine.run_batch(&queries, retriever.as_ref(), |q: &Query| {
            file.for_query(&q.query_id)
                .map(|steps| ScriptedBackend::new(steps.to_vec()))
                .ok_or_else(|| LlmError::InvalidRequest(format!("no script for query {}", q.query_id)))
        }),
    };

    let mut run = create(&cfg.paths.run)?;
    write_run_file(&results, &mut run)?;
    run.flush()?;
    let mut trace = create(&cfg.paths.trace)?;
    for r in &results {
        emit_result_trace(r, &mut trace)?;
    }
    trace.flush()?;

    let mut total = 0u64;
    let mut failed = 0usize;
    for r in &results {
        match r {
            Ok(t) => {
                total += t.total_output_tokens();
                let cause = serde_json::to_value(t.stop_cause)?;
                println!(
                    "{:<12} {:<24} steps={:<3} tokens={}",
                    t.query_id,
                    cause.as_str().unwrap_or("?"),
                    t.steps(),
                    t.total_output_tokens()
                );
            }
            Err(f) => {
                failed += 1;
                total += f.output_tokens();
                println!("{:<12} {:<24} error: {}", f.query_id, "failed", f.error);
            }
        }
    }
    println!("queries={} failed={} total_output_tokens={}", results.len(), failed, total);
    println!("run: {}", cfg.paths.run.display());
    println!("trace: {}", cfg.paths.trace.display());
    Ok(())
}

enum Backend {
    Http(HttpBackend),
    Script(ScriptFile),
}

fn cmd_eval(
    run_path: &Path,
    qrels_path: &Path,
    metrics: &str,
    out: &Path,
    trace: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<()> {
    let metrics = parse_metrics(metrics)?;
    let run = read_run_file(open(run_path)?).with_context(|| format!("{}", run_path.display()))?;
    let qrels = Qrels::read(open(qrels_path)?).with_context(|| format!("{}", qrels_path.display()))?;
    let analytics = match trace {
        Some(p) => Some(analyze_trace_reader(open(p)?).with_context(|| format!("{}", p.display()))?),
        None => None,
    };
    let report = evaluate(&run, &qrels, &metrics, analytics.as_ref());

    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    if let Some(p) = csv_path {
        write_csv(&report, p)?;
    }
    print_table(&report);
    Ok(())
}

fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["query_id".to_string()];
    header.extend(report.metrics.iter().cloned());
    header.extend(["steps".to_string(), "output_tokens".to_string()]);
    w.write_record(&header)?;
    for (qid, s) in &report.per_query {
        let mut row = vec![qid.clone()];
        row.extend(report.metrics.iter().map(|m| format!("{:.6}", s.metrics[m])));
        row.push(s.steps.to_string());
        row.push(s.output_tokens.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn print_table(report: &EvalReport) {
    let agg = &report.aggregate;
    let mut head = String::new();
    let mut vals = String::new();
    for m in &report.metrics {
        head.push_str(&format!("{m:>12}"));
        vals.push_str(&format!("{:>12.4}", agg.metrics[m]));
    }
    println!("{head}{:>10}{:>14}", "steps", "tokens/query");
    println!("{vals}{:>10.2}{:>14.1}", agg.steps, agg.output_tokens);
    println!(
        "evaluated={} excluded={} total_output_tokens={}",
        agg.evaluated, report.excluded_count, agg.total_output_tokens
    );
}

fn cmd_inspect(trace_path: &Path, query_id: &str) -> Result<()> {
    let records = read_trace(open(trace_path)?).with_context(|| format!("{}", trace_path.display()))?;
    let mine: Vec<&TraceRecord> = records.iter().filter(|r| r.query_id() == query_id).collect();
    if mine.is_empty() {
        let mut ids: Vec<&str> = records.iter().map(TraceRecord::query_id).collect();
        ids.sort_unstable();
        ids.dedup();
        bail!("query id {query_id:?} not in trace; available: {}", ids.join(", "));
    }

    println!("query {query_id}");
    let mut step_tokens = 0u64;
    for rec in mine {
        match rec {
            TraceRecord::Transition(t) => {
                step_tokens += t.output_tokens;
                let action = serde_json::to_value(t.action)?;
                println!();
                println!("step {}  {}", t.step, action.as_str().unwrap_or("?"));
                println!("  query:   {}", t.query);
                println!("  docs:    {}", t.doc_ids.join(" "));
                if let Some(r) = &t.reason {
                    println!("  reason:  {r}");
                }
                println!(
                    "  tokens:  {} (attempts {}, temperature {:.1})",
                    t.output_tokens, t.attempts, t.temperature
                );
                if let Some(d) = t.dropped_ids.as_ref().filter(|d| !d.is_empty()) {
                    println!("  dropped: {}", d.join(" "));
                }
                if let Some(d) = t.reappended_ids.as_ref().filter(|d| !d.is_empty()) {
                    println!("  re-appended: {}", d.join(" "));
                }
                if let Some(c) = t.stop_cause {
                    println!("  stop:    {}", serde_json::to_value(c)?.as_str().unwrap_or("?"));
                }
            }
            TraceRecord::Summary(s) => {
                println!();
                println!(
                    "summary: {} steps, {} transitions, stop_cause={}",
                    s.steps,
                    s.transitions,
                    serde_json::to_value(s.stop_cause)?.as_str().unwrap_or("?")
                );
                println!("  initial: {}", s.initial_query);
                println!("  final:   {}", s.final_query);
                println!("  total output tokens: {}", s.total_output_tokens);
            }
            TraceRecord::Failure(f) => {
                println!();
                println!("failed after {} transitions: {}", f.completed_transitions, f.error);
                println!("  total output tokens: {}", f.output_tokens);
            }
        }
    }
    println!("sum of step tokens: {step_tokens}");
    Ok(())
}
