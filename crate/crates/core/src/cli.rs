//! Command-line front end. [`run`] is the whole program minus process exit,
//! so tests can drive it in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::AppConfig;
use crate::evaluation::{
    aggregate, load_dataset, parse_trace, sample_examples, write_results, write_summary,
    write_timings, write_trace_dir, write_trace_file, Mode, Pipeline, QAExample, RunResult,
    TraceRecord,
};
use crate::kg_store::{load_graph, EntityId, GraphFormat, KnowledgeGraph};
use crate::reasoning::QuestionEntities;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SETUP: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "pda",
    version,
    about = "Question answering over a knowledge graph"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Graph file (tab-separated id triples); repeatable.
    #[arg(long, global = true, value_name = "FILE")]
    graph: Vec<PathBuf>,
    /// Directory for trace.jsonl and llm.jsonl.
    #[arg(long, global = true, value_name = "DIR")]
    trace_dir: Option<PathBuf>,
    /// Pipeline variant: full, no_pyramid, no_recursion, no_knowledge.
    #[arg(long, global = true, default_value = "full")]
    mode: Mode,
    /// Override any config key, e.g. `--set reasoning.top_n=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate graph files, then print counts.
    Ingest {
        /// Graph files; defaults to the configured graph.
        files: Vec<PathBuf>,
    },
    /// Answer one question.
    Ask(AskArgs),
    /// Run a dataset and report Hits@1.
    Eval(EvalArgs),
    /// Pretty-print a trace file.
    Inspect {
        /// A trace.jsonl written by `ask --trace` or `--trace-dir`.
        trace: PathBuf,
        /// Only show this example.
        #[arg(long)]
        example: Option<String>,
    },
}

#[derive(Debug, Args)]
struct AskArgs {
    /// Natural-language question.
    question: String,
    /// Entity id or exact label; repeatable. Labels in the question are
    /// matched when omitted.
    #[arg(long = "entity", short = 'e')]
    entities: Vec<String>,
    /// Write this run's trace records here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSONL records: id, question, answers, entities.
    dataset: PathBuf,
    /// Evaluate a seeded random subset of this size.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel examples (eval.workers).
    #[arg(long)]
    workers: Option<usize>,
    /// Per-example records; timings go to a `.timings.jsonl` sibling.
    #[arg(long, default_value = "results.jsonl")]
    results: PathBuf,
    #[arg(long, default_value = "summary.json")]
    summary: PathBuf,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Setup(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Setup(_) => EXIT_SETUP,
        }
    }
}

fn setup(e: impl std::fmt::Display) -> Failure {
    Failure::Setup(e.to_string())
}

/// Runs the CLI with the process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, |k| std::env::var(k).ok(), out, err)
}

/// Runs the CLI with an explicit environment lookup.
pub fn run_with_env<I, T, F>(args: I, env: F, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    F: Fn(&str) -> Option<String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, env, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Setup(m) => m,
            };
            let _ = writeln!(err, "error: {msg}");
            f.code()
        }
    }
}

fn resolve_config<F>(cli: &Cli, env: F) -> Result<AppConfig, Failure>
where
    F: Fn(&str) -> Option<String>,
{
    let mut overrides = cli.overrides.clone();
    if !cli.graph.is_empty() {
        let joined = cli
            .graph
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        overrides.push(("graph".into(), joined));
    }
    if let Some(d) = &cli.trace_dir {
        overrides.push(("trace_dir".into(), d.display().to_string()));
    }
    AppConfig::resolve(cli.config.as_deref(), env, &overrides).map_err(|e| match e {
        crate::config::ConfigError::UnknownKey(_)
        | crate::config::ConfigError::InvalidValue { .. }
            if cli
                .overrides
                .iter()
                .any(|(k, _)| e.to_string().contains(k.as_str())) =>
        {
            Failure::Usage(e.to_string())
        }
        other => setup(other),
    })
}

fn dispatch<F>(cli: Cli, env: F, out: &mut dyn Write) -> Result<(), Failure>
where
    F: Fn(&str) -> Option<String>,
{
    let cfg = resolve_config(&cli, env)?;
    match &cli.command {
        Command::Ingest { files } => ingest(&cfg, files, out),
        Command::Ask(args) => ask(&cfg, cli.mode, args, out),
        Command::Eval(args) => eval(&cfg, cli.mode, args, out),
        Command::Inspect { trace, example } => inspect(trace, example.as_deref(), out),
    }
    .map_err(|e| match e {
        Failure::Setup(m) if m.starts_with("io: ") => Failure::Setup(m[4..].to_string()),
        other => other,
    })
}

fn io(e: std::io::Error) -> Failure {
    Failure::Setup(format!("io: {e}"))
}

fn ingest(cfg: &AppConfig, files: &[PathBuf], out: &mut dyn Write) -> Result<(), Failure> {
    let files = if files.is_empty() { &cfg.graph } else { files };
    if files.is_empty() {
        return Err(Failure::Usage(
            "no graph file given (pass FILE or --graph)".into(),
        ));
    }
    for path in files {
        let kg = load_graph(path, GraphFormat::TsvTriples).map_err(setup)?;
        let stats = kg.stats();
        writeln!(out, "graph: {}", path.display()).map_err(io)?;
        writeln!(out, "triples: {}", kg.len()).map_err(io)?;
        writeln!(out, "entities: {}", kg.entity_count()).map_err(io)?;
        writeln!(out, "relations: {}", kg.relation_count()).map_err(io)?;
        writeln!(out, "lines: {}", stats.parsed_lines).map_err(io)?;
        writeln!(out, "duplicates: {}", stats.duplicate_lines).map_err(io)?;
        writeln!(out, "labels: {}", stats.label_lines).map_err(io)?;
    }
    Ok(())
}

/// Resolves one `--entity` value: an id present in the graph, else every
/// entity carrying that exact label.
fn resolve_entity(kg: &KnowledgeGraph, value: &str) -> Result<Vec<EntityId>, Failure> {
    if let Ok(id) = EntityId::new(value) {
        if kg.contains_entity(&id) {
            return Ok(vec![id]);
        }
    }
    let matches = kg.entities_labelled(value);
    if !matches.is_empty() {
        return Ok(matches);
    }
    let needle = value.to_lowercase();
    let mut near: Vec<(f64, &str)> = kg
        .entity_labels()
        .map(|(_, label)| {
            (
                strsim::normalized_levenshtein(&needle, &label.to_lowercase()),
                label,
            )
        })
        .filter(|(score, label)| *score >= 0.5 || label.to_lowercase().contains(&needle))
        .collect();
    near.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    near.dedup_by(|a, b| a.1 == b.1);
    let mut msg = format!("cannot resolve entity {value:?}: no such id or label");
    if !near.is_empty() {
        let list: Vec<&str> = near.iter().take(5).map(|(_, l)| *l).collect();
        msg.push_str(&format!("; did you mean: {}", list.join(", ")));
    }
    Err(Failure::Setup(msg))
}

fn display_entity(kg: &KnowledgeGraph, e: &EntityId) -> String {
    match kg.entity_label(e) {
        Some(l) => format!("{e} ({l})"),
        None => e.to_string(),
    }
}

fn ask(cfg: &AppConfig, mode: Mode, args: &AskArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let kg = cfg.load_graph().map_err(setup)?;
    let mut entities = Vec::new();
    for v in &args.entities {
        for e in resolve_entity(&kg, v)? {
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
    }
    if entities.is_empty() && mode != Mode::NoKnowledge {
        entities = QuestionEntities::match_labels(&kg, &args.question).entities;
        if entities.is_empty() {
            return Err(Failure::Setup(
                "no task-relevant entities: pass --entity or mention an entity label".into(),
            ));
        }
    }
    let llm = cfg.build_llm().map_err(setup)?;
    let embedder = cfg.build_embedder().map_err(setup)?;
    let pcfg = cfg.pipeline_config().map_err(setup)?;
    let example = QAExample {
        id: "ask".into(),
        question: args.question.clone(),
        gold_aliases: Vec::new(),
        entities,
    };
    let pipeline = Pipeline {
        kg: &kg,
        llm: llm.as_ref(),
        embedder: embedder.as_ref(),
        config: &pcfg,
    };
    let result = pipeline.run(&example, mode);

    if let Some(p) = &args.trace {
        write_trace_file(p, std::slice::from_ref(&result)).map_err(io)?;
    }
    if let Some(d) = &cfg.trace_dir {
        write_trace_dir(d, std::slice::from_ref(&result)).map_err(io)?;
    }
    print_ask(&kg, &example, &result, out).map_err(io)?;
    if let Some(f) = &result.failure {
        return Err(Failure::Setup(format!(
            "{} stage failed: {}",
            f.stage, f.message
        )));
    }
    writeln!(out, "{}", result.predicted).map_err(io)?;
    Ok(())
}

fn print_ask(
    kg: &KnowledgeGraph,
    ex: &QAExample,
    r: &RunResult,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    writeln!(out, "mode: {}", r.mode)?;
    if !ex.entities.is_empty() {
        let names: Vec<String> = ex.entities.iter().map(|e| display_entity(kg, e)).collect();
        writeln!(out, "entities: {}", names.join(", "))?;
    }
    if let Some(p) = &r.pyramid {
        writeln!(out, "main point: {}", p.main_point)?;
        writeln!(out, "sub-points:")?;
        for (i, sp) in p.sub_points.iter().enumerate() {
            writeln!(out, "  {}. {}", i + 1, sp.raw_text)?;
        }
    }
    for it in &r.trace.iterations {
        print_iteration(out, &TraceRecordView::from(it))?;
    }
    if r.failure.is_none() {
        writeln!(out, "retrieved triples: {}", r.trace.aggregated.len())?;
    }
    Ok(())
}

struct TraceRecordView<'a>(&'a crate::reasoning::IterationRecord);

impl<'a> From<&'a crate::reasoning::IterationRecord> for TraceRecordView<'a> {
    fn from(r: &'a crate::reasoning::IterationRecord) -> Self {
        Self(r)
    }
}

fn print_iteration(out: &mut dyn Write, view: &TraceRecordView<'_>) -> std::io::Result<()> {
    let it = view.0;
    writeln!(out, "iteration {}: {}", it.index, it.query.raw_text)?;
    writeln!(
        out,
        "  candidates: {}{}, next subgraph: {}",
        it.candidate_count,
        if it.reseeded { " (reseeded)" } else { "" },
        it.next_subgraph_size
    )?;
    for s in &it.selected {
        writeln!(out, "  {:.4}  {}", s.score, s.text)?;
    }
    Ok(())
}

fn eval(cfg: &AppConfig, mode: Mode, args: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let kg = cfg.load_graph().map_err(setup)?;
    let dataset = load_dataset(&args.dataset).map_err(setup)?;
    let seed = args.seed.unwrap_or(cfg.eval.seed);
    let examples = match args.sample.or(cfg.eval.sample) {
        Some(n) => sample_examples(&dataset, n, seed),
        None => dataset,
    };
    let llm = cfg.build_llm().map_err(setup)?;
    let embedder = cfg.build_embedder().map_err(setup)?;
    let pcfg = cfg.pipeline_config().map_err(setup)?;
    let pipeline = Pipeline {
        kg: &kg,
        llm: llm.as_ref(),
        embedder: embedder.as_ref(),
        config: &pcfg,
    };
    let results = pipeline.run_batch(&examples, mode, args.workers.unwrap_or(cfg.eval.workers));
    let metrics = aggregate(&results);

    write_results(&args.results, &results).map_err(io)?;
    write_timings(&timings_path(&args.results), &results).map_err(io)?;
    write_summary(&args.summary, &metrics).map_err(io)?;
    if let Some(d) = &cfg.trace_dir {
        write_trace_dir(d, &results).map_err(io)?;
    }
    writeln!(out, "mode: {mode}").map_err(io)?;
    writeln!(out, "examples: {}", metrics.total).map_err(io)?;
    writeln!(out, "hits: {}", metrics.hits).map_err(io)?;
    writeln!(out, "failures: {}", metrics.failures).map_err(io)?;
    writeln!(out, "accuracy: {:.2}", metrics.accuracy).map_err(io)?;
    Ok(())
}

/// `results.jsonl` -> `results.timings.jsonl`.
pub fn timings_path(results: &Path) -> PathBuf {
    let stem = results.file_stem().unwrap_or_default().to_string_lossy();
    results.with_file_name(format!("{stem}.timings.jsonl"))
}

fn inspect(path: &Path, example: Option<&str>, out: &mut dyn Write) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Setup(format!("cannot read {}: {e}", path.display())))?;
    let records =
        parse_trace(&text).map_err(|e| Failure::Setup(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        writeln!(out, "no records").map_err(io)?;
        return Ok(());
    }
    let shown: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| example.is_none_or(|id| r.example_id == id))
        .collect();
    if shown.is_empty() {
        return Err(Failure::Setup(format!(
            "no records for example {:?} in {}",
            example.unwrap_or_default(),
            path.display()
        )));
    }
    let mut current: Option<(&str, Mode)> = None;
    for r in shown {
        if current != Some((r.example_id.as_str(), r.mode)) {
            writeln!(out, "example {} [{}]", r.example_id, r.mode).map_err(io)?;
            current = Some((r.example_id.as_str(), r.mode));
        }
        print_iteration(out, &TraceRecordView(&r.iteration)).map_err(io)?;
    }
    Ok(())
}
