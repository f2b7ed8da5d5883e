//! Question answering over a knowledge graph: an LLM decomposes the question
//! into a hierarchy of sub-points, each sub-point drives one hop of
//! embedding-ranked triple retrieval, and the collected triples ground the
//! final answer.

pub mod answer;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod evaluation;
pub mod kg_store;
pub mod llm_client;
pub mod pyramid;
pub mod reasoning;

pub use answer::{generate_answer, AnswerResult, AnswerTemplates};
pub use config::AppConfig;
pub use embedding::{
    cosine_similarity, rank_triples, Embedder, EmbeddingVector, HashedBowEmbedder,
};
pub use evaluation::{
    hits_at_1, run_pipeline, Metrics, Mode, Pipeline, PipelineConfig, QAExample, RunResult,
};
pub use kg_store::{
    load_graph, Direction, EntityId, GraphFormat, KnowledgeGraph, RelationId, Subgraph, Triple,
};
pub use llm_client::{
    ChatRequest, ChatResponse, LlmClient, RemoteLlm, SamplingSettings, ScriptedLlm,
};
pub use pyramid::{align, build_pyramid_prompt, parse_pyramid_response, PyramidAnalysis, SubPoint};
pub use reasoning::{reason, ReasoningConfig, ReasoningTrace, TripleSet};
