//! Final answer prompt assembly and answer extraction.

use thiserror::Error;

use crate::kg_store::KnowledgeGraph;
use crate::llm_client::{ChatRequest, LlmClient, LlmError, SamplingSettings};
use crate::reasoning::TripleSet;

pub const ANSWER_PROMPT_TEMPLATE: &str = include_str!("../assets/answer_prompt.txt");
pub const BARE_PROMPT_TEMPLATE: &str = include_str!("../assets/bare_prompt.txt");
pub const NO_FACTS_MARKER: &str = "No facts retrieved.";

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("answer template is missing the {0} placeholder")]
    Template(&'static str),
    #[error("LLM call failed: {0}")]
    Llm(#[from] LlmError),
    #[error("LLM returned an empty answer")]
    EmptyAnswer,
}

/// Substitutes `{name}` placeholders in one left-to-right pass, so values
/// are never themselves rescanned.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        for (name, value) in vars {
            if rest[open + 1..].starts_with(name) && rest[open + 1 + name.len()..].starts_with('}')
            {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &rest[open + name.len() + 2..];
                continue 'outer;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

/// Prompt templates used for the final answer call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerTemplates {
    pub grounded: String,
    pub bare: String,
}

impl Default for AnswerTemplates {
    fn default() -> Self {
        Self {
            grounded: ANSWER_PROMPT_TEMPLATE.to_string(),
            bare: BARE_PROMPT_TEMPLATE.to_string(),
        }
    }
}

impl AnswerTemplates {
    pub fn with_grounded(grounded: String) -> Result<Self, AnswerError> {
        for p in ["{facts}", "{question}"] {
            if !grounded.contains(p) {
                return Err(AnswerError::Template(p));
            }
        }
        Ok(Self {
            grounded,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerResult {
    pub answer_text: String,
    pub raw_response: String,
    pub prompt_text: String,
    pub triple_count: usize,
}

pub fn build_answer_prompt(
    question: &str,
    triples: &TripleSet,
    kg: &KnowledgeGraph,
) -> Result<String, AnswerError> {
    build_answer_prompt_with(&AnswerTemplates::default(), question, triples, kg)
}

/// One verbalized triple per line, in aggregated order.
pub fn build_answer_prompt_with(
    templates: &AnswerTemplates,
    question: &str,
    triples: &TripleSet,
    kg: &KnowledgeGraph,
) -> Result<String, AnswerError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(AnswerError::EmptyQuestion);
    }
    let facts = if triples.is_empty() {
        NO_FACTS_MARKER.to_string()
    } else {
        triples
            .triples()
            .map(|t| kg.verbalize(t))
            .collect::<Vec<_>>()
            .join("\n")
    };
    Ok(render(
        &templates.grounded,
        &[("facts", &facts), ("question", question)],
    ))
}

/// Prompt carrying the question only, for runs without retrieved knowledge.
pub fn build_bare_prompt(
    templates: &AnswerTemplates,
    question: &str,
) -> Result<String, AnswerError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(AnswerError::EmptyQuestion);
    }
    Ok(render(&templates.bare, &[("question", question)]))
}

/// Trims whitespace and one layer of surrounding quotes.
pub fn clean_answer(raw: &str) -> String {
    let mut s = raw.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('`', '`'), ('“', '”'), ('‘', '’')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            break;
        }
    }
    s.to_string()
}

fn ask<C: LlmClient + ?Sized>(
    llm: &C,
    prompt: String,
    settings: &SamplingSettings,
    triple_count: usize,
) -> Result<AnswerResult, AnswerError> {
    let request = ChatRequest::new(prompt.clone()).with_settings(settings);
    let response = llm.complete(&request)?;
    let answer_text = clean_answer(&response.text);
    if answer_text.is_empty() {
        return Err(AnswerError::EmptyAnswer);
    }
    Ok(AnswerResult {
        answer_text,
        raw_response: response.text,
        prompt_text: prompt,
        triple_count,
    })
}

pub fn generate_answer<C: LlmClient + ?Sized>(
    llm: &C,
    question: &str,
    triples: &TripleSet,
    kg: &KnowledgeGraph,
    templates: &AnswerTemplates,
    settings: &SamplingSettings,
) -> Result<AnswerResult, AnswerError> {
    let prompt = build_answer_prompt_with(templates, question, triples, kg)?;
    ask(llm, prompt, settings, triples.len())
}

/// Asks the bare question with no retrieved triples.
pub fn generate_bare_answer<C: LlmClient + ?Sized>(
    llm: &C,
    question: &str,
    templates: &AnswerTemplates,
    settings: &SamplingSettings,
) -> Result<AnswerResult, AnswerError> {
    let prompt = build_bare_prompt(templates, question)?;
    ask(llm, prompt, settings, 0)
}

/// Lines of an answer prompt that sit between `Facts:` and the next blank
/// line.
pub fn fact_lines(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .skip_while(|l| l.trim() != "Facts:")
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .collect()
}
