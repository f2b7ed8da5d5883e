//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the stdlib `json` module, so they arrive as plain dicts.

use std::path::PathBuf;

use pda_core::embedding::{
    cosine_similarity, hashed_bow_embed, EmbeddingVector, HashedBowEmbedder,
};
use pda_core::evaluation::{
    aggregate, hits_at_1, normalize_answer, run_pipeline, Mode, PipelineConfig, QAExample,
    ResultRecord,
};
use pda_core::kg_store::{self, Direction, EntityId, GraphFormat, Triple};
use pda_core::llm_client::ScriptedLlm;
use pda_core::pyramid::{self, SubPoint};
use pda_core::reasoning::{self, EmptySubgraphPolicy, QuestionEntities, ReasoningConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pda, PdaError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PdaError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?
        .call_method1("loads", (value.to_string(),))
}

fn entity_ids(ids: &[String]) -> PyResult<Vec<EntityId>> {
    ids.iter()
        .map(|s| EntityId::new(s.as_str()).map_err(err))
        .collect()
}

fn triple_tuple(t: &Triple) -> (String, String, String) {
    (
        t.head.to_string(),
        t.relation.to_string(),
        t.tail.to_string(),
    )
}

#[pyclass(name = "KnowledgeGraph", module = "pda", frozen)]
struct PyKnowledgeGraph {
    inner: kg_store::KnowledgeGraph,
}

#[pymethods]
impl PyKnowledgeGraph {
    /// Builds a graph from `(head, relation, tail)` tuples plus optional labels.
    #[new]
    #[pyo3(signature = (triples, labels = None))]
    fn new(
        triples: Vec<(String, String, String)>,
        labels: Option<std::collections::HashMap<String, String>>,
    ) -> PyResult<Self> {
        let parsed = triples
            .iter()
            .map(|(h, r, t)| Triple::parse(h, r, t).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        let mut kg = kg_store::KnowledgeGraph::from_triples(parsed);
        let mut labels: Vec<_> = labels.unwrap_or_default().into_iter().collect();
        labels.sort();
        for (id, label) in labels {
            kg.set_label(&id, label).map_err(err)?;
        }
        Ok(Self { inner: kg })
    }

    /// Loads a TSV triple file and its `.labels` sidecar when present.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = kg_store::load_graph(&path, GraphFormat::TsvTriples).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(triples={}, entities={}, relations={})",
            self.inner.len(),
            self.inner.entity_count(),
            self.inner.relation_count()
        )
    }

    #[getter]
    fn entity_count(&self) -> usize {
        self.inner.entity_count()
    }

    #[getter]
    fn relation_count(&self) -> usize {
        self.inner.relation_count()
    }

    fn triples(&self) -> Vec<(String, String, String)> {
        self.inner.triples().iter().map(triple_tuple).collect()
    }

    fn label(&self, entity: &str) -> PyResult<Option<String>> {
        let id = EntityId::new(entity).map_err(err)?;
        Ok(self.inner.entity_label(&id).map(str::to_string))
    }

    fn entities_labelled(&self, label: &str) -> Vec<String> {
        self.inner
            .entities_labelled(label)
            .into_iter()
            .map(|e| e.to_string())
            .collect()
    }

    #[pyo3(signature = (entity, direction = "both"))]
    fn neighbors(&self, entity: &str, direction: &str) -> PyResult<Vec<(String, String, String)>> {
        let id = EntityId::new(entity).map_err(err)?;
        let dir: Direction = direction.parse().map_err(err)?;
        Ok(self
            .inner
            .neighbors(&id, dir)
            .into_iter()
            .map(triple_tuple)
            .collect())
    }

    fn verbalize(&self, head: &str, relation: &str, tail: &str) -> PyResult<String> {
        let t = Triple::parse(head, relation, tail).map_err(err)?;
        Ok(self.inner.verbalize(&t))
    }
}

#[pyfunction]
#[pyo3(signature = (text, dimension = None))]
fn embed(text: &str, dimension: Option<usize>) -> Vec<f64> {
    match dimension {
        None => hashed_bow_embed(text).values().to_vec(),
        Some(d) => HashedBowEmbedder::new(d).counts(text),
    }
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    let u = EmbeddingVector::new(u).map_err(err)?;
    let v = EmbeddingVector::new(v).map_err(err)?;
    cosine_similarity(&u, &v).map_err(err)
}

#[pyfunction]
fn build_pyramid_prompt(question: &str) -> PyResult<String> {
    pyramid::build_pyramid_prompt(question).map_err(err)
}

#[pyfunction]
fn parse_pyramid_response<'py>(py: Python<'py>, raw: &str) -> PyResult<Bound<'py, PyAny>> {
    let analysis = pyramid::parse_pyramid_response(raw).map_err(err)?;
    to_py(py, &serde_json::to_value(&analysis).map_err(err)?)
}

#[pyfunction]
fn split_segments(text: &str) -> PyResult<Vec<String>> {
    pyramid::split_segments(text).map_err(err)
}

#[pyfunction(name = "hits_at_1")]
fn py_hits_at_1(predicted: &str, gold: Vec<String>) -> bool {
    hits_at_1(predicted, &gold)
}

#[pyfunction(name = "normalize_answer")]
fn py_normalize_answer(text: &str) -> Vec<String> {
    normalize_answer(text)
}

fn reasoning_config(
    top_n: usize,
    max_iterations: usize,
    direction: &str,
    stop_on_empty: bool,
) -> PyResult<ReasoningConfig> {
    let cfg = ReasoningConfig {
        top_n,
        max_iterations,
        expansion_direction: direction.parse().map_err(err)?,
        empty_subgraph_policy: if stop_on_empty {
            EmptySubgraphPolicy::Stop
        } else {
            EmptySubgraphPolicy::ReseedFromQuestionEntities
        },
        ..ReasoningConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Runs recursive retrieval with the hashed bag-of-words embedder.
#[pyfunction]
#[pyo3(signature = (kg, entities, sub_points, top_n = 10, max_iterations = 3, direction = "both", stop_on_empty = false))]
#[allow(clippy::too_many_arguments)]
fn reason<'py>(
    py: Python<'py>,
    kg: &PyKnowledgeGraph,
    entities: Vec<String>,
    sub_points: Vec<String>,
    top_n: usize,
    max_iterations: usize,
    direction: &str,
    stop_on_empty: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = reasoning_config(top_n, max_iterations, direction, stop_on_empty)?;
    let entities = QuestionEntities::provided(entity_ids(&entities)?);
    let sub_points = sub_points
        .into_iter()
        .map(|s| SubPoint::parse(s).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    let embedder = HashedBowEmbedder::default();
    let trace = py
        .detach(|| reasoning::reason(&kg.inner, &entities, &sub_points, &embedder, &cfg))
        .map_err(err)?;
    to_py(py, &serde_json::to_value(&trace).map_err(err)?)
}

/// Answers one question end to end against a scripted LLM.
///
/// `script` is the rules JSON accepted by the CLI's scripted backend.
#[pyfunction]
#[pyo3(signature = (kg, question, script, entities, gold = None, mode = "full", top_n = 10, max_iterations = 3))]
#[allow(clippy::too_many_arguments)]
fn ask<'py>(
    py: Python<'py>,
    kg: &PyKnowledgeGraph,
    question: &str,
    script: &str,
    entities: Vec<String>,
    gold: Option<Vec<String>>,
    mode: &str,
    top_n: usize,
    max_iterations: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mode: Mode = mode.parse().map_err(err)?;
    let llm = ScriptedLlm::from_json(script).map_err(err)?;
    let config = PipelineConfig {
        reasoning: reasoning_config(top_n, max_iterations, "both", false)?,
        ..PipelineConfig::default()
    };
    let example = QAExample {
        id: "ask".into(),
        question: question.into(),
        gold_aliases: gold.unwrap_or_default(),
        entities: entity_ids(&entities)?,
    };
    let embedder = HashedBowEmbedder::default();
    let result = py.detach(|| run_pipeline(&example, &kg.inner, &llm, &embedder, &config, mode));
    let mut value = serde_json::to_value(ResultRecord::from(&result)).map_err(err)?;
    value["pyramid"] = serde_json::to_value(&result.pyramid).map_err(err)?;
    value["trace"] = serde_json::to_value(&result.trace).map_err(err)?;
    value["accuracy"] = serde_json::json!(aggregate(std::slice::from_ref(&result)).accuracy);
    to_py(py, &value)
}

#[pymodule]
fn pda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PdaError", m.py().get_type::<PdaError>())?;
    m.add_class::<PyKnowledgeGraph>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(build_pyramid_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_pyramid_response, m)?)?;
    m.add_function(wrap_pyfunction!(split_segments, m)?)?;
    m.add_function(wrap_pyfunction!(py_hits_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(py_normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(reason, m)?)?;
    m.add_function(wrap_pyfunction!(ask, m)?)?;
    Ok(())
}
