//! Retrieval metrics, run evaluation against qrels, trace analytics and the
//! query intent-alignment judge.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{read_trace, EngineError, RunRecord, TraceRecord};
use crate::llm::{ChatBackend, LlmError};
use crate::policy::{escalate, PolicyConfig};
use crate::state::{ActionKind, StopCause};

/// Judge prompt with `{query_original}` and `{query}` placeholders.
pub const ALIGNMENT_PROMPT: &str = include_str!("../assets/alignment_prompt.txt");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown metric {0:?} (expected ndcg@10, map@10 or recall@10)")]
    UnknownMetric(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("judge gave no parseable score after {attempts} attempts")]
    NoScore { attempts: u32 },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Trace(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Graded judgments for one query: doc_id → grade. Absent means 0.
pub type Relevance = HashMap<String, u32>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    by_query: BTreeMap<String, Relevance>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.by_query
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn get(&self, query_id: &str) -> Option<&Relevance> {
        self.by_query.get(query_id)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.get(query_id)
            .and_then(|r| r.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    /// TREC format: `query_id iteration doc_id grade`, whitespace separated.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut qrels = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Parse {
                line: idx + 1,
                message,
            };
            let [qid, _iter, doc, grade] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            let grade: u32 = grade
                .parse()
                .map_err(|_| err(format!("grade {grade:?} is not a non-negative integer")))?;
            qrels.insert(qid, doc, grade);
        }
        Ok(qrels)
    }
}

/// True when at least one document has grade ≥ 1.
pub fn is_judgeable(rels: &Relevance) -> bool {
    rels.values().any(|&g| g >= 1)
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank0: usize) -> f64 {
    (rank0 as f64 + 2.0).log2()
}

/// nDCG@k with exponential gain. The ideal ordering uses every judged
/// document, retrieved or not. Returns 0 when no document is relevant.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], rels: &Relevance, k: usize) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(rels.get(d.as_ref()).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = rels.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn relevant_count(rels: &Relevance) -> usize {
    rels.values().filter(|&&g| g >= 1).count()
}

fn is_relevant(rels: &Relevance, doc: &str) -> bool {
    rels.get(doc).is_some_and(|&g| g >= 1)
}

/// AP@k: sum of precision@i over relevant ranks i ≤ k, divided by min(R, k).
pub fn map_at_k<S: AsRef<str>>(ranking: &[S], rels: &Relevance, k: usize) -> f64 {
    let r = relevant_count(rels);
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        if is_relevant(rels, d.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.min(k) as f64
}

pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], rels: &Relevance, k: usize) -> f64 {
    let r = relevant_count(rels);
    if r == 0 {
        return 0.0;
    }
    let top: HashSet<&str> = ranking.iter().take(k).map(AsRef::as_ref).collect();
    let hits = top.iter().filter(|d| is_relevant(rels, d)).count();
    hits as f64 / r as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Ndcg10,
    Map10,
    Recall10,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ndcg10, Metric::Map10, Metric::Recall10];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ndcg10 => "ndcg@10",
            Metric::Map10 => "map@10",
            Metric::Recall10 => "recall@10",
        }
    }

    pub fn compute<S: AsRef<str>>(self, ranking: &[S], rels: &Relevance) -> f64 {
        match self {
            Metric::Ndcg10 => ndcg_at_k(ranking, rels, 10),
            Metric::Map10 => map_at_k(ranking, rels, 10),
            Metric::Recall10 => recall_at_k(ranking, rels, 10),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "ndcg@10" => Ok(Metric::Ndcg10),
            "map@10" => Ok(Metric::Map10),
            "recall@10" => Ok(Metric::Recall10),
            _ => Err(EvalError::UnknownMetric(s.to_string())),
        }
    }
}

/// Parses a comma-separated metric list, keeping first-seen order.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(EvalError::UnknownMetric(list.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTraceStats {
    pub steps: usize,
    pub output_tokens: u64,
    pub stop_cause: Option<StopCause>,
}

/// Action counts, depth bins and token totals over a trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceAnalytics {
    pub action_histogram: BTreeMap<ActionKind, u64>,
    /// Entry `i` counts queries with at least `i + 1` Refine/Rerank transitions.
    pub step_depth_cumulative: Vec<u64>,
    pub per_query: BTreeMap<String, QueryTraceStats>,
    pub stop_causes: BTreeMap<StopCause, u64>,
    pub failed_queries: Vec<String>,
    pub total_output_tokens: u64,
}

/// Cumulative depth bins: a query with `n` steps adds one to bins `1..=n`.
pub fn cumulative_depth_bins<I: IntoIterator<Item = usize>>(steps: I) -> Vec<u64> {
    let mut bins: Vec<u64> = Vec::new();
    for n in steps {
        if bins.len() < n {
            bins.resize(n, 0);
        }
        for b in bins.iter_mut().take(n) {
            *b += 1;
        }
    }
    bins
}

pub fn analyze_traces(records: &[TraceRecord]) -> TraceAnalytics {
    let mut out = TraceAnalytics::default();
    for rec in records {
        match rec {
            TraceRecord::Transition(t) => {
                let stats = out.per_query.entry(t.query_id.clone()).or_default();
                stats.output_tokens += t.output_tokens;
                out.total_output_tokens += t.output_tokens;
                if t.action != ActionKind::Stop {
                    stats.steps += 1;
                    *out.action_histogram.entry(t.action).or_default() += 1;
                }
            }
            TraceRecord::Summary(s) => {
                let stats = out.per_query.entry(s.query_id.clone()).or_default();
                stats.stop_cause = Some(s.stop_cause);
                *out.stop_causes.entry(s.stop_cause).or_default() += 1;
            }
            TraceRecord::Failure(f) => {
                out.per_query.entry(f.query_id.clone()).or_default();
                out.failed_queries.push(f.query_id.clone());
            }
        }
    }
    out.step_depth_cumulative = cumulative_depth_bins(out.per_query.values().map(|s| s.steps));
    out
}

/// Reads and analyzes a trace. Summary totals are cross-checked against the
/// transition lines; a mismatch is reported at the summary's line.
pub fn analyze_trace_reader<R: BufRead>(reader: R) -> Result<TraceAnalytics, EvalError> {
    let mut lines = Vec::new();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = read_trace(line.as_bytes()).map_err(|e| match e {
            EngineError::Trace { message, .. } => EvalError::Parse {
                line: idx + 1,
                message,
            },
            other => other.into(),
        })?;
        lines.extend(std::iter::repeat_n(idx + 1, rec.len()));
        records.extend(rec);
    }
    let analytics = analyze_traces(&records);
    for (rec, &line) in records.iter().zip(&lines) {
        if let TraceRecord::Summary(s) = rec {
            let stats = &analytics.per_query[&s.query_id];
            if stats.output_tokens != s.total_output_tokens || stats.steps != s.steps {
                return Err(EvalError::Parse {
                    line,
                    message: format!(
                        "summary for {:?} says {} steps / {} tokens, transitions sum to {} / {}",
                        s.query_id, s.steps, s.total_output_tokens, stats.steps, stats.output_tokens
                    ),
                });
            }
        }
    }
    Ok(analytics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub steps: usize,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub steps: f64,
    pub output_tokens: f64,
    pub total_output_tokens: u64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    MissingFromQrels,
    MissingFromRun,
    NoRelevantDocuments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub query_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<String>,
    pub per_query: BTreeMap<String, QueryScores>,
    pub aggregate: Aggregate,
    pub excluded: Vec<Excluded>,
    pub excluded_count: usize,
    pub action_histogram: BTreeMap<ActionKind, u64>,
    pub step_depth_cumulative: Vec<u64>,
    /// Mean nDCG@10 of the queries in each cumulative depth bin.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub depth_ndcg10: Vec<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores a run. Queries absent from either side, or with no relevant
/// document, are listed as excluded and left out of the means.
pub fn evaluate(
    run: &[RunRecord],
    qrels: &Qrels,
    metrics: &[Metric],
    traces: Option<&TraceAnalytics>,
) -> EvalReport {
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    let in_run: HashSet<&str> = run.iter().map(|r| r.query_id.as_str()).collect();
    let mut depth_scores: Vec<(usize, f64)> = Vec::new();

    for rec in run {
        let Some(rels) = qrels.get(&rec.query_id) else {
            excluded.push(Excluded {
                query_id: rec.query_id.clone(),
                reason: ExclusionReason::MissingFromQrels,
            });
            continue;
        };
        if !is_judgeable(rels) {
            excluded.push(Excluded {
                query_id: rec.query_id.clone(),
                reason: ExclusionReason::NoRelevantDocuments,
            });
            continue;
        }
        let scores: BTreeMap<String, f64> = metrics
            .iter()
            .map(|m| (m.name().to_string(), m.compute(&rec.ranked_doc_ids, rels)))
            .collect();
        depth_scores.push((rec.steps, Metric::Ndcg10.compute(&rec.ranked_doc_ids, rels)));
        per_query.insert(
            rec.query_id.clone(),
            QueryScores {
                metrics: scores,
                steps: rec.steps,
                output_tokens: rec.output_tokens,
            },
        );
    }
    for qid in qrels.query_ids() {
        if !in_run.contains(qid) {
            excluded.push(Excluded {
                query_id: qid.to_string(),
                reason: ExclusionReason::MissingFromRun,
            });
        }
    }

    let evaluated: Vec<&QueryScores> = per_query.values().collect();
    let aggregate = Aggregate {
        metrics: metrics
            .iter()
            .map(|m| (m.name().to_string(), mean(evaluated.iter().map(|q| q.metrics[m.name()]))))
            .collect(),
        steps: mean(evaluated.iter().map(|q| q.steps as f64)),
        output_tokens: mean(evaluated.iter().map(|q| q.output_tokens as f64)),
        total_output_tokens: evaluated.iter().map(|q| q.output_tokens).sum(),
        evaluated: evaluated.len(),
    };

    let (action_histogram, step_depth_cumulative) = match traces {
        Some(t) => (t.action_histogram.clone(), t.step_depth_cumulative.clone()),
        None => (
            BTreeMap::new(),
            cumulative_depth_bins(run.iter().map(|r| r.steps)),
        ),
    };
    let max_depth = depth_scores.iter().map(|&(s, _)| s).max().unwrap_or(0);
    let depth_ndcg10 = (1..=max_depth)
        .map(|d| mean(depth_scores.iter().filter(|&&(s, _)| s >= d).map(|&(_, v)| v)))
        .collect();

    EvalReport {
        metrics: metrics.iter().map(|m| m.name().to_string()).collect(),
        per_query,
        aggregate,
        excluded_count: excluded.len(),
        excluded,
        action_histogram,
        step_depth_cumulative,
        depth_ndcg10,
    }
}

/// Fills the judge prompt with both queries.
pub fn render_alignment_prompt(original_query: &str, refined_query: &str) -> String {
    ALIGNMENT_PROMPT
        .replace("{query_original}", original_query)
        .replace("{query}", refined_query)
}

/// First decimal number in `text` (optional sign, optional fraction).
pub fn first_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let starts_digit = bytes[i].is_ascii_digit();
        let starts_frac = bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit);
        if starts_digit || starts_frac {
            let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'.' && bytes.get(j + 1).is_some_and(u8::is_ascii_digit) {
                j += 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
            }
            return text[start..j].parse().ok();
        }
        i += 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentScore {
    /// Clamped to `[0, 1]`.
    pub score: f64,
    pub output_tokens: u64,
    pub attempts: u32,
}

/// Asks the judge how well `refined_query` keeps the intent of
/// `original_query`. Unparseable replies are retried hotter, as the policy does.
pub fn intent_alignment<B: ChatBackend + ?Sized>(
    original_query: &str,
    refined_query: &str,
    judge: &mut B,
    retry: &PolicyConfig,
) -> Result<AlignmentScore, EvalError> {
    if original_query.trim().is_empty() || refined_query.trim().is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    let prompt = render_alignment_prompt(original_query, refined_query);
    let esc = escalate(judge, retry, "", &prompt, |reply| {
        first_number(reply).ok_or("no number in reply")
    })?;
    match esc.value {
        Some(v) => Ok(AlignmentScore {
            score: v.clamp(0.0, 1.0),
            output_tokens: esc.output_tokens,
            attempts: esc.attempts(),
        }),
        None => Err(EvalError::NoScore {
            attempts: esc.attempts(),
        }),
    }
}

/// Alignment scores averaged two ways, plus the mean at each refine depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// Mean over every scored refine step.
    pub per_step_mean: f64,
    /// Mean of each query's own mean.
    pub per_query_mean: f64,
    /// Entry `i` is the mean score of the `(i + 1)`-th refine across queries.
    pub by_depth: Vec<f64>,
}

/// `scores` holds `(query_id, refine ordinal starting at 1, score)`.
pub fn summarize_alignment(scores: &[(String, usize, f64)]) -> AlignmentSummary {
    let mut per_query: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (qid, depth, s) in scores {
        per_query.entry(qid).or_default().push(*s);
        by_depth.entry(*depth).or_default().push(*s);
    }
    let max_depth = by_depth.keys().max().copied().unwrap_or(0);
    AlignmentSummary {
        per_step_mean: mean(scores.iter().map(|s| s.2)),
        per_query_mean: mean(per_query.values().map(|v| mean(v.iter().copied()))),
        by_depth: (1..=max_depth)
            .map(|d| by_depth.get(&d).map(|v| mean(v.iter().copied())).unwrap_or(0.0))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptStep, ScriptedBackend};

    fn rels(pairs: &[(&str, u32)]) -> Relevance {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let r = rels(&[("a", 2), ("b", 1)]);
        assert_eq!(ndcg_at_k(&["a", "b", "c"], &r, 10), 1.0);
        assert_eq!(ndcg_at_k(&["x", "y"], &r, 10), 0.0);
        assert_eq!(ndcg_at_k(&["a"], &rels(&[("a", 0)]), 10), 0.0);
        // Hand-evaluated: DCG = 1 + 1/log2(4) = 1.5; IDCG = 1 + 1/log2(3) + 1/log2(4).
        let r = rels(&[("d1", 1), ("d3", 1), ("d5", 1)]);
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2() + 0.5);
        assert!((ndcg_at_k(&["d1", "d2", "d3"], &r, 10) - expected).abs() < 1e-12);
    }

    #[test]
    fn ndcg_ideal_counts_unretrieved_relevant_docs() {
        let r = rels(&[("a", 1), ("b", 1)]);
        assert!(ndcg_at_k(&["a"], &r, 10) < 1.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_at_k(&["d2", "d1"], &rels(&[("d1", 1)]), 10), 0.5);
        assert_eq!(map_at_k(&["x"], &rels(&[("d1", 1)]), 10), 0.0);
        let all: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        let r: Relevance = all.iter().map(|d| (d.clone(), 1)).collect();
        assert_eq!(map_at_k(&all, &r, 10), 1.0);
    }

    #[test]
    fn recall_examples() {
        let r = rels(&[("a", 1), ("b", 2), ("c", 1), ("d", 1)]);
        assert_eq!(recall_at_k(&["a", "b", "c", "d"], &r, 10), 1.0);
        assert_eq!(recall_at_k(&["a", "x", "c"], &r, 10), 0.5);
        assert_eq!(recall_at_k(&["a"], &rels(&[("a", 0)]), 10), 0.0);
    }

    #[test]
    fn qrels_parsing() {
        let q = Qrels::read("q1 0 d1 2\nq1 0 d2 0\n\nq2 Q0 d9 1\n".as_bytes()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 2);
        assert_eq!(q.grade("q1", "d3"), 0);
        assert_eq!(q.grade("q2", "d9"), 1);
        assert!(matches!(
            Qrels::read("q1 0 d1 2\nq1 0 d1\n".as_bytes()),
            Err(EvalError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Qrels::read("q1 0 d1 -1\n".as_bytes()),
            Err(EvalError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(parse_metrics("ndcg@10,map@10,recall@10").unwrap(), Metric::ALL.to_vec());
        assert_eq!(parse_metrics("nDCG@10").unwrap(), vec![Metric::Ndcg10]);
        assert!(parse_metrics("p@5").is_err());
        assert!(parse_metrics("").is_err());
    }

    #[test]
    fn depth_bins() {
        assert_eq!(cumulative_depth_bins([3]), vec![1, 1, 1]);
        assert_eq!(cumulative_depth_bins([1, 3, 3, 6]), vec![4, 3, 3, 1, 1, 1]);
        assert!(cumulative_depth_bins([0, 0]).is_empty());
    }

    #[test]
    fn number_extraction() {
        assert_eq!(first_number("0.95"), Some(0.95));
        assert_eq!(first_number("Score: 1.2"), Some(1.2));
        assert_eq!(first_number("score is .7!"), Some(0.7));
        assert_eq!(first_number("-0.3"), Some(-0.3));
        assert_eq!(first_number("1."), Some(1.0));
        assert_eq!(first_number("none"), None);
    }

    fn judge(replies: &[&str]) -> ScriptedBackend {
        ScriptedBackend::new(replies.iter().map(|r| ScriptStep::from(*r)))
    }

    #[test]
    fn alignment_parses_and_clamps() {
        let cfg = PolicyConfig::default();
        let s = intent_alignment("a", "b", &mut judge(&["0.95"]), &cfg).unwrap();
        assert_eq!(s.score, 0.95);
        let s = intent_alignment("a", "a", &mut judge(&["1.0"]), &cfg).unwrap();
        assert_eq!(s.score, 1.0);
        let s = intent_alignment("a", "b", &mut judge(&["Score: 1.2"]), &cfg).unwrap();
        assert_eq!(s.score, 1.0);
        let s = intent_alignment("a", "b", &mut judge(&["hmm", "0.4"]), &cfg).unwrap();
        assert_eq!((s.score, s.attempts), (0.4, 2));
    }

    #[test]
    fn alignment_prompt_substitutes_queries() {
        let mut j = judge(&["0.5"]);
        intent_alignment("what is LLM", "define large language model", &mut j, &PolicyConfig::default()).unwrap();
        let sent = &j.requests()[0].user_text;
        assert!(sent.contains("The first query is: \"what is LLM\"."));
        assert!(sent.contains("The second query is: \"define large language model\"."));
        assert!(sent.starts_with("Please compare the second query"));
    }

    #[test]
    fn alignment_errors() {
        let cfg = PolicyConfig::default();
        assert!(matches!(
            intent_alignment("a", "b", &mut judge(&["x"; 6]), &cfg),
            Err(EvalError::NoScore { attempts: 6 })
        ));
        assert!(matches!(
            intent_alignment("", "b", &mut judge(&["1"]), &cfg),
            Err(EvalError::EmptyQuery)
        ));
    }

    #[test]
    fn alignment_summary_both_means() {
        let s = summarize_alignment(&[
            ("q1".into(), 1, 1.0),
            ("q1".into(), 2, 0.8),
            ("q1".into(), 3, 0.6),
            ("q2".into(), 1, 0.4),
        ]);
        assert!((s.per_step_mean - 0.7).abs() < 1e-12);
        assert!((s.per_query_mean - 0.6).abs() < 1e-12);
        assert_eq!(s.by_depth.len(), 3);
        assert!((s.by_depth[0] - 0.7).abs() < 1e-12);
    }

    fn run_rec(qid: &str, docs: &[&str], steps: usize, tokens: u64) -> RunRecord {
        RunRecord {
            query_id: qid.into(),
            final_query: "q".into(),
            ranked_doc_ids: docs.iter().map(|s| s.to_string()).collect(),
            stop_cause: Some(StopCause::PolicyStop),
            steps,
            output_tokens: tokens,
            error: None,
        }
    }

    #[test]
    fn evaluate_excludes_unjudged_queries() {
        let mut qrels = Qrels::new();
        qrels.insert("a", "d1", 1);
        qrels.insert("b", "d2", 0);
        qrels.insert("c", "d3", 1);
        let run = vec![run_rec("a", &["d1"], 2, 10), run_rec("b", &["d2"], 1, 5), run_rec("z", &[], 0, 1)];
        let report = evaluate(&run, &qrels, &Metric::ALL, None);
        assert_eq!(report.aggregate.evaluated, 1);
        assert_eq!(report.aggregate.metrics["ndcg@10"], 1.0);
        assert_eq!(report.excluded_count, 3);
        let reasons: Vec<_> = report.excluded.iter().map(|e| (e.query_id.as_str(), e.reason)).collect();
        assert!(reasons.contains(&("b", ExclusionReason::NoRelevantDocuments)));
        assert!(reasons.contains(&("z", ExclusionReason::MissingFromQrels)));
        assert!(reasons.contains(&("c", ExclusionReason::MissingFromRun)));
        assert_eq!(report.step_depth_cumulative, vec![2, 1]);
        assert_eq!(report.depth_ndcg10, vec![1.0, 1.0]);
    }

    #[test]
    fn evaluate_respects_metric_selection() {
        let mut qrels = Qrels::new();
        qrels.insert("a", "d1", 1);
        let report = evaluate(&[run_rec("a", &["d1"], 0, 0)], &qrels, &[Metric::Map10], None);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["per_query"]["a"].get("map@10").is_some());
        assert!(json["per_query"]["a"].get("ndcg@10").is_none());
    }

    #[test]
    fn trace_reader_names_bad_line() {
        let text = "{\"record\":\"failure\",\"query_id\":\"q\",\"query\":\"x\",\"error\":\"e\",\"completed_transitions\":0,\"output_tokens\":0}\nnot json\n";
        assert!(matches!(
            analyze_trace_reader(text.as_bytes()),
            Err(EvalError::Parse { line: 2, .. })
        ));
    }
}
