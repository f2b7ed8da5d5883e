//! Dataset ingestion, Hits@1 scoring, pipeline orchestration with ablation
//! modes, batch execution and result files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{generate_answer, generate_bare_answer, AnswerTemplates};
use crate::embedding::Embedder;
use crate::kg_store::{EntityId, KnowledgeGraph};
use crate::llm_client::{LlmClient, SamplingSettings};
use crate::pyramid::{align, Exchange, PyramidAnalysis};
use crate::reasoning::{
    non_recursive, reason, single_query, IterationRecord, QuestionEntities, ReasoningConfig,
    ReasoningTrace,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_aliases: Vec<String>,
    pub entities: Vec<EntityId>,
}

/// Parses line-delimited JSON records, keeping file order.
pub fn parse_dataset(text: &str) -> Result<Vec<QAExample>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(line).map_err(|e| DatasetError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if ex.id.is_empty() {
            return Err(DatasetError::Record {
                line: line_no,
                message: "field `id` is empty".into(),
            });
        }
        if ex.question.trim().is_empty() {
            return Err(DatasetError::Record {
                line: line_no,
                message: "field `question` is empty".into(),
            });
        }
        if ex.gold_aliases.is_empty() {
            return Err(DatasetError::Record {
                line: line_no,
                message: "field `answers` is empty".into(),
            });
        }
        if !seen.insert(ex.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: ex.id,
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

/// Picks `n` examples with a seeded generator, preserving dataset order.
pub fn sample_examples(examples: &[QAExample], n: usize, seed: u64) -> Vec<QAExample> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, examples.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| examples[i].clone()).collect()
}

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Lowercase, drop punctuation, collapse whitespace, and strip one leading
/// article. Returned as tokens.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .to_lowercase();
    let mut tokens: Vec<String> = cleaned.split_whitespace().map(String::from).collect();
    if tokens.len() > 1 && ARTICLES.contains(&tokens[0].as_str()) {
        tokens.remove(0);
    }
    tokens
}

/// True when the normalized prediction equals, or contains as a run of
/// whole words, the normalized form of some alias.
pub fn hits_at_1(predicted: &str, gold_aliases: &[String]) -> bool {
    let pred = normalize_answer(predicted);
    gold_aliases.iter().any(|alias| {
        let gold = normalize_answer(alias);
        !gold.is_empty()
            && gold.len() <= pred.len()
            && pred.windows(gold.len()).any(|w| w == gold.as_slice())
    })
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    NoPyramid,
    NoRecursion,
    NoKnowledge,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Full,
        Mode::NoPyramid,
        Mode::NoRecursion,
        Mode::NoKnowledge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoPyramid => "no_pyramid",
            Mode::NoRecursion => "no_recursion",
            Mode::NoKnowledge => "no_knowledge",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown mode {s:?} (expected full, no_pyramid, no_recursion or no_knowledge)"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Alignment,
    Retrieval,
    Answer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Alignment => "alignment",
            Stage::Retrieval => "retrieval",
            Stage::Answer => "answer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub alignment_ms: f64,
    pub retrieval_ms: f64,
    pub answer_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub stage: Stage,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub example_id: String,
    pub question: String,
    pub gold_aliases: Vec<String>,
    pub mode: Mode,
    pub predicted: String,
    pub hit: bool,
    pub pyramid: Option<PyramidAnalysis>,
    pub trace: ReasoningTrace,
    pub timings: Timings,
    pub exchanges: Vec<LlmExchange>,
    pub failure: Option<StageFailure>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub sampling: SamplingSettings,
    pub reasoning: ReasoningConfig,
    pub templates: AnswerTemplates,
}

/// Everything a pipeline run needs besides the example itself.
pub struct Pipeline<'a> {
    pub kg: &'a KnowledgeGraph,
    pub llm: &'a dyn LlmClient,
    pub embedder: &'a dyn Embedder,
    pub config: &'a PipelineConfig,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Pipeline<'_> {
    /// Runs one example. Stage errors are captured in the result instead of
    /// propagating.
    pub fn run(&self, example: &QAExample, mode: Mode) -> RunResult {
        let start = Instant::now();
        let mut result = RunResult {
            example_id: example.id.clone(),
            question: example.question.clone(),
            gold_aliases: example.gold_aliases.clone(),
            mode,
            predicted: String::new(),
            hit: false,
            pyramid: None,
            trace: ReasoningTrace::default(),
            timings: Timings::default(),
            exchanges: Vec::new(),
            failure: None,
        };
        if let Err(failure) = self.stages(example, mode, &mut result) {
            log::warn!(
                "{} [{mode}]: {} failed: {}",
                example.id,
                failure.stage,
                failure.message
            );
            result.failure = Some(failure);
        }
        result.hit =
            result.failure.is_none() && hits_at_1(&result.predicted, &example.gold_aliases);
        result.timings.total_ms = ms(start);
        result
    }

    fn stages(&self, ex: &QAExample, mode: Mode, out: &mut RunResult) -> Result<(), StageFailure> {
        let fail = |stage: Stage| {
            move |e: &dyn fmt::Display| StageFailure {
                stage,
                message: e.to_string(),
            }
        };
        let cfg = self.config;
        let entities = QuestionEntities::provided(ex.entities.clone());
        if matches!(mode, Mode::Full | Mode::NoRecursion | Mode::NoPyramid) && entities.is_empty() {
            return Err(StageFailure {
                stage: Stage::Setup,
                message: format!("mode {mode} requires task-relevant entities"),
            });
        }

        if matches!(mode, Mode::Full | Mode::NoRecursion) {
            let t = Instant::now();
            let aligned = align(&ex.question, self.llm, &cfg.sampling);
            out.timings.alignment_ms = ms(t);
            let aligned = aligned.map_err(|e| {
                if let crate::pyramid::AlignError::Parse { responses, .. } = &e {
                    out.exchanges.extend(responses.iter().map(|r| LlmExchange {
                        stage: Stage::Alignment,
                        prompt: String::new(),
                        response: r.clone(),
                    }));
                }
                fail(Stage::Alignment)(&e)
            })?;
            out.exchanges.extend(
                aligned
                    .exchanges
                    .iter()
                    .map(|Exchange { prompt, response }| LlmExchange {
                        stage: Stage::Alignment,
                        prompt: prompt.clone(),
                        response: response.clone(),
                    }),
            );
            out.pyramid = Some(aligned.analysis);
        }

        if mode != Mode::NoKnowledge {
            let t = Instant::now();
            let trace = match mode {
                Mode::Full => reason(
                    self.kg,
                    &entities,
                    &out.pyramid.as_ref().expect("aligned").sub_points,
                    self.embedder,
                    &cfg.reasoning,
                ),
                Mode::NoRecursion => non_recursive(
                    self.kg,
                    &entities,
                    &out.pyramid.as_ref().expect("aligned").sub_points,
                    self.embedder,
                    &cfg.reasoning,
                ),
                Mode::NoPyramid => single_query(
                    self.kg,
                    &entities,
                    &ex.question,
                    self.embedder,
                    &cfg.reasoning,
                ),
                Mode::NoKnowledge => unreachable!(),
            };
            out.timings.retrieval_ms = ms(t);
            out.trace = trace.map_err(|e| fail(Stage::Retrieval)(&e))?;
        }

        let t = Instant::now();
        let answer = if mode == Mode::NoKnowledge {
            generate_bare_answer(self.llm, &ex.question, &cfg.templates, &cfg.sampling)
        } else {
            generate_answer(
                self.llm,
                &ex.question,
                &out.trace.aggregated,
                self.kg,
                &cfg.templates,
                &cfg.sampling,
            )
        };
        out.timings.answer_ms = ms(t);
        let answer = answer.map_err(|e| fail(Stage::Answer)(&e))?;
        out.exchanges.push(LlmExchange {
            stage: Stage::Answer,
            prompt: answer.prompt_text,
            response: answer.raw_response,
        });
        out.predicted = answer.answer_text;
        Ok(())
    }

    /// Runs every example on up to `workers` threads; results keep dataset
    /// order.
    pub fn run_batch(&self, examples: &[QAExample], mode: Mode, workers: usize) -> Vec<RunResult> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| examples.par_iter().map(|ex| self.run(ex, mode)).collect())
    }
}

pub fn run_pipeline(
    example: &QAExample,
    kg: &KnowledgeGraph,
    llm: &dyn LlmClient,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
    mode: Mode,
) -> RunResult {
    Pipeline {
        kg,
        llm,
        embedder,
        config,
    }
    .run(example, mode)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub total: usize,
    pub hits: usize,
    pub failures: usize,
    pub accuracy: f64,
}

impl ModeMetrics {
    fn add(&mut self, r: &RunResult) {
        self.total += 1;
        self.hits += r.hit as usize;
        self.failures += r.failure.is_some() as usize;
        self.accuracy = accuracy(self.hits, self.total);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub hits: usize,
    pub failures: usize,
    pub accuracy: f64,
    pub empty_run: bool,
    pub per_mode: BTreeMap<Mode, ModeMetrics>,
}

fn accuracy(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

pub fn aggregate(results: &[RunResult]) -> Metrics {
    let mut overall = ModeMetrics::default();
    let mut per_mode: BTreeMap<Mode, ModeMetrics> = BTreeMap::new();
    for r in results {
        overall.add(r);
        per_mode.entry(r.mode).or_default().add(r);
    }
    Metrics {
        total: overall.total,
        hits: overall.hits,
        failures: overall.failures,
        accuracy: overall.accuracy,
        empty_run: results.is_empty(),
        per_mode,
    }
}

/// One line of the per-example results file. Holds only run-invariant
/// fields so repeated runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub mode: Mode,
    pub question: String,
    pub predicted: String,
    pub hit: bool,
    pub gold: Vec<String>,
    pub sub_points: Vec<String>,
    pub triple_count: usize,
    pub failure: Option<StageFailure>,
}

impl From<&RunResult> for ResultRecord {
    fn from(r: &RunResult) -> Self {
        Self {
            id: r.example_id.clone(),
            mode: r.mode,
            question: r.question.clone(),
            predicted: r.predicted.clone(),
            hit: r.hit,
            gold: r.gold_aliases.clone(),
            sub_points: r
                .pyramid
                .as_ref()
                .map(|p| p.sub_points.iter().map(|s| s.raw_text.clone()).collect())
                .unwrap_or_default(),
            triple_count: r.trace.aggregated.len(),
            failure: r.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub id: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub timings: Timings,
}

/// One iteration of one example, as stored in `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub example_id: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub iteration: IterationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub example_id: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub exchange: LlmExchange,
}

fn create(path: &Path) -> io::Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_results(path: &Path, results: &[RunResult]) -> io::Result<()> {
    write_lines(path, results.iter().map(ResultRecord::from))
}

pub fn write_timings(path: &Path, results: &[RunResult]) -> io::Result<()> {
    write_lines(
        path,
        results.iter().map(|r| TimingRecord {
            id: r.example_id.clone(),
            mode: r.mode,
            timings: r.timings,
        }),
    )
}

pub fn write_summary(path: &Path, metrics: &Metrics) -> io::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, metrics)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn trace_records(results: &[RunResult]) -> impl Iterator<Item = TraceRecord> + '_ {
    results.iter().flat_map(|r| {
        r.trace.iterations.iter().map(move |it| TraceRecord {
            example_id: r.example_id.clone(),
            mode: r.mode,
            iteration: it.clone(),
        })
    })
}

/// Writes `trace.jsonl` (one record per iteration) and `llm.jsonl` (every
/// prompt and response verbatim) into `dir`.
pub fn write_trace_dir(dir: &Path, results: &[RunResult]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_trace_file(&dir.join("trace.jsonl"), results)?;
    write_lines(
        &dir.join("llm.jsonl"),
        results.iter().flat_map(|r| {
            r.exchanges.iter().map(move |x| ExchangeRecord {
                example_id: r.example_id.clone(),
                mode: r.mode,
                exchange: x.clone(),
            })
        }),
    )
}

pub fn write_trace_file(path: &Path, results: &[RunResult]) -> io::Result<()> {
    write_lines(path, trace_records(results))
}

#[derive(Debug, Error)]
pub enum TraceReadError {
    #[error("record {record} (byte offset {offset}): {message}")]
    Corrupt {
        record: usize,
        offset: usize,
        message: String,
    },
}

/// Parses a trace file, reporting the 1-based record number and byte
/// offset of the first bad line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceReadError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let rec = serde_json::from_str(body).map_err(|e| TraceReadError::Corrupt {
                record: i + 1,
                offset,
                message: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aliases(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dataset_case1_record() {
        let ds = parse_dataset(
            r#"{"id":"c1","question":"What is the name of the capital city of the country that only shares a border with Spain?","answers":["Lisbon"],"entities":["Q29"]}"#,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].gold_aliases, vec!["Lisbon"]);
        assert_eq!(ds[0].entities[0].as_str(), "Q29");
    }

    #[test]
    fn dataset_errors() {
        let err = parse_dataset("\n{\"id\":\"a\",\"question\":\"q\",\"entities\":[]}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("answers"), "{msg}");

        let err = parse_dataset(concat!(
            r#"{"id":"a","question":"q","answers":["x"],"entities":[]}"#,
            "\n",
            r#"{"id":"a","question":"q2","answers":["y"],"entities":[]}"#
        ))
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { line: 2, .. }));

        assert!(parse_dataset(r#"{"id":"a","question":"q","answers":[],"entities":[]}"#).is_err());
    }

    #[test]
    fn hits_basic() {
        assert!(hits_at_1("Lisbon", &aliases(&["Lisbon"])));
        // "the answer is lisbon." → [answer, is, lisbon] ⊇ [lisbon]
        assert!(hits_at_1("The answer is lisbon.", &aliases(&["Lisbon"])));
        assert!(!hits_at_1("Andorra la Vella", &aliases(&["Lisbon"])));
    }

    #[test]
    fn sampling_is_seeded_and_ordered() {
        let ds: Vec<QAExample> = (0..20)
            .map(|i| QAExample {
                id: format!("e{i}"),
                question: "q".into(),
                gold_aliases: aliases(&["a"]),
                entities: vec![],
            })
            .collect();
        let a = sample_examples(&ds, 5, 7);
        let b = sample_examples(&ds, 5, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let idx: Vec<usize> = a.iter().map(|e| e.id[1..].parse().unwrap()).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_examples(&ds, 50, 1).len(), 20);
    }

    fn result(mode: Mode, hit: bool) -> RunResult {
        RunResult {
            example_id: "x".into(),
            question: "q".into(),
            gold_aliases: vec![],
            mode,
            predicted: String::new(),
            hit,
            pyramid: None,
            trace: ReasoningTrace::default(),
            timings: Timings::default(),
            exchanges: vec![],
            failure: None,
        }
    }

    #[test]
    fn aggregate_counts() {
        let m = aggregate(&[
            result(Mode::Full, true),
            result(Mode::Full, true),
            result(Mode::Full, false),
        ]);
        assert_eq!(m.total, 3);
        assert!((m.accuracy - 66.67).abs() < 0.01);

        let m = aggregate(&[]);
        assert_eq!(m.total, 0);
        assert_eq!(m.accuracy, 0.0);
        assert!(m.empty_run);
    }

    #[test]
    fn aggregate_per_mode() {
        let rs = vec![
            result(Mode::Full, true),
            result(Mode::NoKnowledge, false),
            result(Mode::Full, false),
            result(Mode::NoKnowledge, true),
            result(Mode::NoKnowledge, true),
        ];
        let m = aggregate(&rs);
        // partitioned counting oracle
        for mode in [Mode::Full, Mode::NoKnowledge] {
            let sub: Vec<&RunResult> = rs.iter().filter(|r| r.mode == mode).collect();
            let hits = sub.iter().filter(|r| r.hit).count();
            let pm = m.per_mode[&mode];
            assert_eq!(pm.total, sub.len());
            assert_eq!(pm.hits, hits);
            assert!((pm.accuracy - 100.0 * hits as f64 / sub.len() as f64).abs() < 1e-12);
        }
        assert_eq!(m.per_mode.values().map(|p| p.total).sum::<usize>(), m.total);
    }

    #[test]
    fn trace_parse_reports_offset() {
        let good = r#"{"example_id":"a","mode":"full","index":1,"query":{"raw_text":"x","segments":["x"]},"candidate_count":1,"reseeded":false,"selected":[],"next_subgraph_size":0}"#;
        let text = format!("{good}\n{{broken\n");
        let err = parse_trace(&text).unwrap_err();
        let TraceReadError::Corrupt { record, offset, .. } = err;
        assert_eq!(record, 2);
        assert_eq!(offset, good.len() + 1);
        assert_eq!(parse_trace(good).unwrap().len(), 1);
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("bogus".parse::<Mode>().is_err());
    }
}
