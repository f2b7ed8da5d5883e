use std::path::{Path, PathBuf};

use pda_core::cli::{run_with_env, EXIT_OK, EXIT_SETUP, EXIT_USAGE};
use pda_core::evaluation::parse_trace;

const CASE1_Q: &str =
    "What is the name of the capital city of the country that only shares a border with Spain?";

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn pda_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["pda"];
    argv.extend_from_slice(args);
    let lookup = |k: &str| {
        env.iter()
            .find(|(n, _)| *n == k)
            .map(|(_, v)| v.to_string())
    };
    let code = run_with_env(argv, lookup, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn pda(args: &[&str]) -> Run {
    pda_env(args, &[])
}

fn case1_args(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--graph".into(),
        fixture("case1.tsv"),
        "--set".into(),
        "llm.backend=scripted".into(),
        "--set".into(),
        format!("llm.script={}", fixture("case1_llm.json")),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn ingest_reports_counts() {
    let r = pda(&["ingest", &fixture("case1.tsv")]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("triples: 9"), "{}", r.out);
    assert!(r.out.contains("entities: 8"));
    assert!(r.out.contains("relations: 2"));
    assert!(r.out.contains("duplicates: 0"));
}

#[test]
fn ingest_counts_duplicates_and_uses_global_graph() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.tsv");
    std::fs::write(&p, "A\tr\tB\nA\tr\tB\n# note\n\nB\tr\tC\n").unwrap();
    let r = pda(&["--graph", p.to_str().unwrap(), "ingest"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("triples: 2"));
    assert!(r.out.contains("duplicates: 1"));
}

#[test]
fn ingest_missing_file() {
    let r = pda(&["ingest", "/no/such/graph.tsv"]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("file not found"), "{}", r.err);
}

#[test]
fn ingest_malformed_line_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.tsv");
    std::fs::write(&p, "A\tr\tB\nA r B\n").unwrap();
    let r = pda(&["ingest", p.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("bad.tsv:2:"), "{}", r.err);
}

#[test]
fn ask_case1_ends_with_lisbon() {
    let r = pda(&refs(&case1_args(&["ask", CASE1_Q, "--entity", "Q29"])));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(r.out.lines().last(), Some("Lisbon"));
    assert!(r.out.contains("sub-points:"));
    assert!(r
        .out
        .contains("1. The country that shares a border only with Spain is Andorra."));
    assert!(r.out.contains("iteration 2:"));
    assert!(r.out.contains("Portugal, capital, Lisbon"));
}

#[test]
fn ask_resolves_label_and_matches_question_text() {
    let by_label = pda(&refs(&case1_args(&["ask", CASE1_Q, "--entity", "Spain"])));
    assert_eq!(by_label.code, EXIT_OK, "{}", by_label.err);
    assert!(by_label.out.contains("entities: Q29 (Spain)"));

    let implicit = pda(&refs(&case1_args(&["ask", CASE1_Q])));
    assert_eq!(implicit.code, EXIT_OK, "{}", implicit.err);
    assert!(implicit.out.contains("entities: Q29 (Spain)"));
    assert_eq!(implicit.out.lines().last(), Some("Lisbon"));
}

#[test]
fn ask_unknown_entity_lists_near_misses() {
    let r = pda(&refs(&case1_args(&["ask", CASE1_Q, "--entity", "Spainn"])));
    assert_eq!(r.code, EXIT_SETUP);
    assert!(
        r.err.contains("cannot resolve entity \"Spainn\""),
        "{}",
        r.err
    );
    assert!(r.err.contains("did you mean: Spain"), "{}", r.err);
}

#[test]
fn ask_no_knowledge_has_no_triples() {
    let r = pda(&refs(&case1_args(&[
        "--mode",
        "no_knowledge",
        "ask",
        CASE1_Q,
    ])));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("retrieved triples: 0"));
    assert!(!r.out.contains("iteration 1"));
    assert_eq!(r.out.lines().last(), Some("Andorra la Vella"));
}

#[test]
fn ask_reports_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.json");
    std::fs::write(
        &script,
        r#"{"rules":[{"contains":["Pyramid"],"response":"no idea"}]}"#,
    )
    .unwrap();
    let r = pda(&[
        "--graph",
        &fixture("case1.tsv"),
        "--set",
        "llm.backend=scripted",
        "--set",
        &format!("llm.script={}", script.display()),
        "ask",
        CASE1_Q,
        "-e",
        "Q29",
    ]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("alignment stage failed"), "{}", r.err);
}

#[test]
fn ask_without_key_env_fails_setup() {
    let r = pda(&[
        "--graph",
        &fixture("case1.tsv"),
        "--set",
        "llm.api_key_env=PDA_TEST_UNSET_KEY_VAR",
        "ask",
        CASE1_Q,
        "-e",
        "Q29",
    ]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("PDA_TEST_UNSET_KEY_VAR"), "{}", r.err);
}

#[test]
fn trace_dir_records_prompts_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let td = dir.path().join("traces");
    let r = pda(&refs(&case1_args(&[
        "--trace-dir",
        td.to_str().unwrap(),
        "ask",
        CASE1_Q,
        "-e",
        "Q29",
    ])));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let llm = std::fs::read_to_string(td.join("llm.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = llm
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["stage"], "alignment");
    assert_eq!(
        lines[0]["prompt"],
        pda_core::pyramid::build_pyramid_prompt(CASE1_Q).unwrap()
    );
    assert_eq!(lines[1]["stage"], "answer");
    assert_eq!(lines[1]["response"], "Lisbon");
    let trace = parse_trace(&std::fs::read_to_string(td.join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.len(), 2);
}

fn eval_args(dir: &Path, mode: &str, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--graph".into(),
        fixture("case1.tsv"),
        "--graph".into(),
        fixture("case2.tsv"),
        "--mode".into(),
        mode.into(),
        "--set".into(),
        "llm.backend=scripted".into(),
        "--set".into(),
        format!("llm.script={}", fixture("batch_llm.json")),
        "eval".into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v.extend([
        "--results".into(),
        dir.join("results.jsonl").display().to_string(),
        "--summary".into(),
        dir.join("summary.json").display().to_string(),
    ]);
    v
}

#[test]
fn eval_two_examples_all_hit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("two.jsonl");
    let batch = std::fs::read_to_string(fixture("batch.jsonl")).unwrap();
    let two: Vec<&str> = batch
        .lines()
        .filter(|l| l.contains("\"c1\"") || l.contains("\"c2\""))
        .collect();
    std::fs::write(&ds, two.join("\n")).unwrap();
    let r = pda(&refs(&eval_args(
        dir.path(),
        "full",
        &[ds.to_str().unwrap()],
    )));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("accuracy: 100.00"), "{}", r.out);
    assert!(dir.path().join("results.timings.jsonl").exists());
}

#[test]
fn eval_sample_is_seeded() {
    let mut picks = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let r = pda(&refs(&eval_args(
            dir.path(),
            "full",
            &[&fixture("batch.jsonl"), "--sample", "1", "--seed", "7"],
        )));
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        assert!(r.out.contains("examples: 1"));
        let res = std::fs::read_to_string(dir.path().join("results.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(res.lines().next().unwrap()).unwrap();
        picks.push(v["id"].as_str().unwrap().to_string());
    }
    assert_eq!(picks[0], picks[1]);
}

#[test]
fn eval_no_pyramid_uses_question_as_query() {
    let dir = tempfile::tempdir().unwrap();
    let td = dir.path().join("t");
    let mut args = vec!["--trace-dir".to_string(), td.display().to_string()];
    args.extend(eval_args(
        dir.path(),
        "no_pyramid",
        &[&fixture("case1.jsonl")],
    ));
    let r = pda(&refs(&args));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("mode: no_pyramid"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["per_mode"]["no_pyramid"]["total"], 1);
    let trace = parse_trace(&std::fs::read_to_string(td.join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].iteration.query.raw_text, CASE1_Q);
    let llm = std::fs::read_to_string(td.join("llm.jsonl")).unwrap();
    assert!(!llm.contains("\"alignment\""));
}

#[test]
fn eval_records_per_example_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    std::fs::write(
        &ds,
        r#"{"id":"x","question":"Who?","answers":["Nobody"],"entities":[]}
{"id":"c1","question":"What is the name of the capital city of the country that only shares a border with Spain?","answers":["Lisbon"],"entities":["Q29"]}
"#,
    )
    .unwrap();
    let r = pda(&refs(&eval_args(
        dir.path(),
        "full",
        &[ds.to_str().unwrap()],
    )));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("failures: 1"));
    assert!(r.out.contains("accuracy: 50.00"));
    let res = std::fs::read_to_string(dir.path().join("results.jsonl")).unwrap();
    assert!(res.lines().next().unwrap().contains("setup"));
}

#[test]
fn eval_bad_dataset_is_setup_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    std::fs::write(&ds, "{not json}\n").unwrap();
    let r = pda(&refs(&eval_args(
        dir.path(),
        "full",
        &[ds.to_str().unwrap()],
    )));
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("line 1"), "{}", r.err);
}

fn case1_trace(dir: &Path) -> PathBuf {
    let p = dir.join("trace.jsonl");
    let r = pda(&refs(&case1_args(&[
        "ask",
        CASE1_Q,
        "-e",
        "Q29",
        "--trace",
        p.to_str().unwrap(),
    ])));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    p
}

#[test]
fn inspect_case1_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = case1_trace(dir.path());
    let r = pda(&["inspect", p.to_str().unwrap(), "--example", "ask"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(r.out.matches("iteration ").count(), 2);
    assert!(r.out.contains("Spain, shares border with, Portugal"));
    assert!(r.out.contains("Portugal, capital, Lisbon"));
    assert!(r.out.contains("candidates: 4, next subgraph: 7"));
}

#[test]
fn inspect_unknown_example() {
    let dir = tempfile::tempdir().unwrap();
    let p = case1_trace(dir.path());
    let r = pda(&["inspect", p.to_str().unwrap(), "--example", "nope"]);
    assert_ne!(r.code, EXIT_OK);
    assert!(r.err.contains("nope"));
}

#[test]
fn inspect_empty_and_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let r = pda(&["inspect", empty.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK);
    assert_eq!(r.out.trim(), "no records");

    let good = std::fs::read_to_string(case1_trace(dir.path())).unwrap();
    let first = good.lines().next().unwrap();
    let corrupt = dir.path().join("corrupt.jsonl");
    std::fs::write(&corrupt, format!("{first}\n{{\"example_id\": 3\n")).unwrap();
    let r = pda(&["inspect", corrupt.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("record 2"), "{}", r.err);
    assert!(
        r.err.contains(&format!("byte offset {}", first.len() + 1)),
        "{}",
        r.err
    );
}

#[test]
fn top_n_precedence_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pda.toml");
    std::fs::write(&cfg, "[reasoning]\ntop_n = 1\n").unwrap();
    let selected = |env: &[(&str, &str)], flag: Option<&str>| -> usize {
        let trace = dir.path().join("t.jsonl");
        let mut extra = vec!["--config".to_string(), cfg.display().to_string()];
        if let Some(f) = flag {
            extra.extend(["--set".to_string(), format!("reasoning.top_n={f}")]);
        }
        extra.extend(
            [
                "ask",
                CASE1_Q,
                "-e",
                "Q29",
                "--trace",
                trace.to_str().unwrap(),
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        let r = pda_env(&refs(&case1_args(&refs(&extra))), env);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        let t = parse_trace(&std::fs::read_to_string(&trace).unwrap()).unwrap();
        t[0].iteration.selected.len()
    };
    assert_eq!(selected(&[], None), 1);
    assert_eq!(selected(&[("PDA_REASONING_TOP_N", "2")], None), 2);
    assert_eq!(selected(&[("PDA_REASONING_TOP_N", "2")], Some("3")), 3);
}

#[test]
fn config_rejects_unknown_and_key_material() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pda.toml");
    std::fs::write(&cfg, "[llm]\napi_key = \"sk-live\"\n").unwrap();
    let r = pda(&[
        "--config",
        cfg.to_str().unwrap(),
        "ingest",
        &fixture("case1.tsv"),
    ]);
    assert_eq!(r.code, EXIT_SETUP);
    assert!(r.err.contains("api_key"), "{}", r.err);

    let r = pda(&["--config", "/no/such.toml", "ingest", &fixture("case1.tsv")]);
    assert_eq!(r.code, EXIT_SETUP);
}

#[test]
fn invalid_arguments_exit_2() {
    assert_eq!(pda(&["--mode", "sideways", "ingest"]).code, EXIT_USAGE);
    assert_eq!(pda(&["ask"]).code, EXIT_USAGE);
    assert_eq!(pda(&["eval", "x", "--sample", "many"]).code, EXIT_USAGE);
    assert_eq!(
        pda(&["--set", "reasoning.top_n=zero", "ingest", "x"]).code,
        EXIT_USAGE
    );
}
