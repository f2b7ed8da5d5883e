//! Recursive subgraph retrieval driven by ordered sub-points.
//!
//! Each iteration scores the current candidate subgraph against one
//! sub-point, keeps the top N triples, and builds the next candidate pool
//! from the neighborhoods of their tail entities.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{rank_by_queries, EmbedError, Embedder, ScoredTriple};
use crate::kg_store::{Direction, EntityId, KnowledgeGraph, Subgraph, Triple, TripleId};
use crate::pyramid::SubPoint;

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_MAX_ITERATIONS: usize = 8;

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("no seed neighborhood: none of the question entities has incident triples")]
    NoSeedNeighborhood,
    #[error("no question entities supplied")]
    NoEntities,
    #[error("no sub-points supplied")]
    NoSubPoints,
    #[error("invalid reasoning config: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySubgraphPolicy {
    #[default]
    ReseedFromQuestionEntities,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentAggregation {
    #[default]
    MaxScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasoningConfig {
    pub top_n: usize,
    pub max_iterations: usize,
    pub expansion_direction: Direction,
    pub empty_subgraph_policy: EmptySubgraphPolicy,
    pub segment_aggregation: SegmentAggregation,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            expansion_direction: Direction::Both,
            empty_subgraph_policy: EmptySubgraphPolicy::default(),
            segment_aggregation: SegmentAggregation::MaxScore,
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        if self.top_n == 0 {
            return Err(ReasoningError::Config("top_n must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(ReasoningError::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySource {
    DatasetProvided,
    LabelMatched,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionEntities {
    pub entities: Vec<EntityId>,
    pub source: EntitySource,
}

impl QuestionEntities {
    pub fn provided(entities: Vec<EntityId>) -> Self {
        Self {
            entities,
            source: EntitySource::DatasetProvided,
        }
    }

    /// Entities whose label occurs in `question` as a whole-word span.
    /// Longer labels are tried first and claim their characters.
    pub fn match_labels(kg: &KnowledgeGraph, question: &str) -> Self {
        let mut labels: Vec<(&EntityId, &str)> = kg
            .entity_labels()
            .filter(|(id, l)| !l.trim().is_empty() && kg.contains_entity(id))
            .collect();
        labels.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
        let mut claimed = vec![false; question.len()];
        let mut found: Vec<(usize, EntityId)> = Vec::new();
        for (id, label) in labels {
            for (pos, _) in question.match_indices(label) {
                let end = pos + label.len();
                let before_ok = question[..pos]
                    .chars()
                    .next_back()
                    .is_none_or(|c| !c.is_alphanumeric());
                let after_ok = question[end..]
                    .chars()
                    .next()
                    .is_none_or(|c| !c.is_alphanumeric());
                if before_ok && after_ok && !claimed[pos..end].iter().any(|c| *c) {
                    claimed[pos..end].iter_mut().for_each(|c| *c = true);
                    found.push((pos, id.clone()));
                    break;
                }
            }
        }
        found.sort();
        Self {
            entities: found.into_iter().map(|(_, id)| id).collect(),
            source: EntitySource::LabelMatched,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// A selected triple with its score, as recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub text: String,
    pub score: f64,
}

impl Selection {
    pub fn triple(&self) -> Triple {
        Triple::parse(&self.head, &self.relation, &self.tail).expect("selection ids are valid")
    }
}

impl From<&ScoredTriple> for Selection {
    fn from(s: &ScoredTriple) -> Self {
        Self {
            head: s.triple.head.to_string(),
            relation: s.triple.relation.to_string(),
            tail: s.triple.tail.to_string(),
            text: s.text.clone(),
            score: s.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub query: SubPoint,
    pub candidate_count: usize,
    /// True when the candidate pool was reseeded from the question entities.
    pub reseeded: bool,
    pub selected: Vec<Selection>,
    pub next_subgraph_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedTriple {
    pub triple: Triple,
    pub text: String,
    pub best_score: f64,
    /// Iteration that first selected this triple.
    pub iteration: usize,
}

/// Deduplicated union of per-iteration selections, in first-seen order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<AggregatedTriple>", into = "Vec<AggregatedTriple>")]
pub struct TripleSet {
    entries: Vec<AggregatedTriple>,
    index: HashMap<Triple, usize>,
}

impl PartialEq for TripleSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl From<Vec<AggregatedTriple>> for TripleSet {
    fn from(entries: Vec<AggregatedTriple>) -> Self {
        let mut set = TripleSet::new();
        for e in entries {
            set.add(e.triple, e.text, e.best_score, e.iteration);
        }
        set
    }
}

impl From<TripleSet> for Vec<AggregatedTriple> {
    fn from(set: TripleSet) -> Self {
        set.entries
    }
}

impl TripleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, triple: Triple, text: String, score: f64, iteration: usize) {
        match self.index.get(&triple) {
            Some(&i) => {
                let e = &mut self.entries[i];
                if score > e.best_score {
                    e.best_score = score;
                }
            }
            None => {
                self.index.insert(triple.clone(), self.entries.len());
                self.entries.push(AggregatedTriple {
                    triple,
                    text,
                    best_score: score,
                    iteration,
                });
            }
        }
    }

    pub fn entries(&self) -> &[AggregatedTriple] {
        &self.entries
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.entries.iter().map(|e| &e.triple)
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.index.contains_key(triple)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub seed_size: usize,
    pub iterations: Vec<IterationRecord>,
    pub aggregated: TripleSet,
}

impl ReasoningTrace {
    fn push(&mut self, record: IterationRecord) {
        for s in &record.selected {
            self.aggregated
                .add(s.triple(), s.text.clone(), s.score, record.index);
        }
        self.iterations.push(record);
    }
}

/// Scores the subgraph against each segment of `sub_point` and keeps the
/// best segment score per triple.
pub fn retrieve_iteration<E: Embedder + ?Sized>(
    subgraph: &Subgraph,
    sub_point: &SubPoint,
    kg: &KnowledgeGraph,
    embedder: &E,
    top_n: usize,
) -> Result<Vec<ScoredTriple>, EmbedError> {
    if subgraph.is_empty() {
        return Ok(Vec::new());
    }
    let segs: Vec<&str> = sub_point.segments.iter().map(String::as_str).collect();
    let queries = embedder.embed_batch(&segs)?;
    rank_by_queries(&queries, subgraph, kg, embedder, top_n)
}

/// Union of the neighborhoods of the selected triples' tail entities.
pub fn expand<'a, I>(kg: &KnowledgeGraph, selected: I, direction: Direction) -> Subgraph
where
    I: IntoIterator<Item = &'a Triple>,
{
    let mut tails: Vec<&EntityId> = Vec::new();
    for t in selected {
        if !tails.contains(&&t.tail) {
            tails.push(&t.tail);
        }
    }
    let mut sg = Subgraph::new();
    for tail in tails {
        sg.extend(kg.neighbor_ids(tail, direction));
    }
    sg
}

fn check_inputs(
    entities: &QuestionEntities,
    sub_points: &[SubPoint],
    config: &ReasoningConfig,
) -> Result<(), ReasoningError> {
    config.validate()?;
    if entities.is_empty() {
        return Err(ReasoningError::NoEntities);
    }
    if sub_points.is_empty() {
        return Err(ReasoningError::NoSubPoints);
    }
    Ok(())
}

/// Runs the recursive retrieval over `sub_points` in order.
pub fn reason<E: Embedder + ?Sized>(
    kg: &KnowledgeGraph,
    entities: &QuestionEntities,
    sub_points: &[SubPoint],
    embedder: &E,
    config: &ReasoningConfig,
) -> Result<ReasoningTrace, ReasoningError> {
    check_inputs(entities, sub_points, config)?;
    let seed = kg.seed_subgraph(&entities.entities, config.expansion_direction);
    if seed.is_empty() && config.empty_subgraph_policy == EmptySubgraphPolicy::Stop {
        return Err(ReasoningError::NoSeedNeighborhood);
    }

    let mut trace = ReasoningTrace {
        seed_size: seed.len(),
        ..ReasoningTrace::default()
    };
    let mut candidates = seed.clone();
    let rounds = sub_points.len().min(config.max_iterations);
    for (i, sp) in sub_points.iter().take(rounds).enumerate() {
        let mut reseeded = false;
        if candidates.is_empty() && i > 0 {
            match config.empty_subgraph_policy {
                EmptySubgraphPolicy::Stop => break,
                EmptySubgraphPolicy::ReseedFromQuestionEntities => {
                    candidates = seed.clone();
                    reseeded = true;
                }
            }
        }
        let selected = retrieve_iteration(&candidates, sp, kg, embedder, config.top_n)?;
        let next = expand(
            kg,
            selected.iter().map(|s| &s.triple),
            config.expansion_direction,
        );
        trace.push(IterationRecord {
            index: i + 1,
            query: sp.clone(),
            candidate_count: candidates.len(),
            reseeded,
            selected: selected.iter().map(Selection::from).collect(),
            next_subgraph_size: next.len(),
        });
        candidates = next;
    }
    Ok(trace)
}

/// Single pass over the seed subgraph with `query` as the only query.
pub fn single_query<E: Embedder + ?Sized>(
    kg: &KnowledgeGraph,
    entities: &QuestionEntities,
    query: &str,
    embedder: &E,
    config: &ReasoningConfig,
) -> Result<ReasoningTrace, ReasoningError> {
    let sp = SubPoint {
        raw_text: query.to_string(),
        segments: vec![query.to_string()],
    };
    non_recursive(kg, entities, std::slice::from_ref(&sp), embedder, config)
}

/// Scores every sub-point against the seed subgraph only, with no expansion.
pub fn non_recursive<E: Embedder + ?Sized>(
    kg: &KnowledgeGraph,
    entities: &QuestionEntities,
    sub_points: &[SubPoint],
    embedder: &E,
    config: &ReasoningConfig,
) -> Result<ReasoningTrace, ReasoningError> {
    check_inputs(entities, sub_points, config)?;
    let seed = kg.seed_subgraph(&entities.entities, config.expansion_direction);
    if seed.is_empty() && config.empty_subgraph_policy == EmptySubgraphPolicy::Stop {
        return Err(ReasoningError::NoSeedNeighborhood);
    }
    let mut trace = ReasoningTrace {
        seed_size: seed.len(),
        ..ReasoningTrace::default()
    };
    for (i, sp) in sub_points.iter().take(config.max_iterations).enumerate() {
        let selected = retrieve_iteration(&seed, sp, kg, embedder, config.top_n)?;
        trace.push(IterationRecord {
            index: i + 1,
            query: sp.clone(),
            candidate_count: seed.len(),
            reseeded: false,
            selected: selected.iter().map(Selection::from).collect(),
            next_subgraph_size: seed.len(),
        });
    }
    Ok(trace)
}

/// Looks up the ids of a trace's selections in `kg`. Used by invariant
/// checks.
pub fn selected_ids(kg: &KnowledgeGraph, record: &IterationRecord) -> Vec<Option<TripleId>> {
    record
        .selected
        .iter()
        .map(|s| kg.id_of(&s.triple()))
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::embedding::HashedBowEmbedder;
    use proptest::prelude::*;

    fn id(prefix: &'static str, n: usize) -> impl Strategy<Value = String> {
        (0..n).prop_map(move |i| format!("{prefix}{i}"))
    }

    fn graph() -> impl Strategy<Value = KnowledgeGraph> {
        prop::collection::vec((id("e", 8), id("r", 3), id("e", 8)), 0..40).prop_map(|rows| {
            KnowledgeGraph::from_triples(
                rows.iter().map(|(h, r, t)| Triple::parse(h, r, t).unwrap()),
            )
        })
    }

    fn sub_point() -> impl Strategy<Value = SubPoint> {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![id("e", 8), id("r", 3)], 1..4)
                .prop_map(|w| w.join(" ")),
            1..3,
        )
        .prop_map(|segs| SubPoint::parse(segs.join(" [SEP] ")).unwrap())
    }

    fn direction() -> impl Strategy<Value = Direction> {
        prop::sample::select(vec![
            Direction::Outgoing,
            Direction::Incoming,
            Direction::Both,
        ])
    }

    fn touches(t: &Triple, ends: &[EntityId], dir: Direction) -> bool {
        let out = matches!(dir, Direction::Outgoing | Direction::Both) && ends.contains(&t.head);
        let inc = matches!(dir, Direction::Incoming | Direction::Both) && ends.contains(&t.tail);
        out || inc
    }

    proptest! {
        #[test]
        fn loop_invariants(kg in graph(),
                           ents in prop::collection::vec(id("e", 10), 1..3),
                           subs in prop::collection::vec(sub_point(), 1..5),
                           top_n in 1usize..6,
                           max_iterations in 1usize..5,
                           dir in direction(),
                           stop in any::<bool>()) {
            let cfg = ReasoningConfig {
                top_n,
                max_iterations,
                expansion_direction: dir,
                empty_subgraph_policy: if stop { EmptySubgraphPolicy::Stop } else { EmptySubgraphPolicy::ReseedFromQuestionEntities },
                ..ReasoningConfig::default()
            };
            let entities: Vec<EntityId> = ents.iter().map(|s| EntityId::new(s.as_str()).unwrap()).collect();
            let seed = kg.seed_subgraph(&entities, dir);
            let run = reason(&kg, &QuestionEntities::provided(entities.clone()), &subs, &HashedBowEmbedder::default(), &cfg);
            let trace = match run {
                Err(ReasoningError::NoSeedNeighborhood) => {
                    prop_assert!(stop && seed.is_empty());
                    return Ok(());
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(t) => t,
            };
            prop_assert_eq!(trace.seed_size, seed.len());
            prop_assert!(trace.iterations.len() <= max_iterations.min(subs.len()));

            let mut ends = entities.clone();
            let mut total = 0;
            for (i, it) in trace.iterations.iter().enumerate() {
                prop_assert_eq!(it.index, i + 1);
                if i == 0 {
                    prop_assert_eq!(it.candidate_count, seed.len());
                }
                if it.reseeded {
                    prop_assert!(!stop);
                    ends = entities.clone();
                    prop_assert_eq!(it.candidate_count, seed.len());
                }
                prop_assert_eq!(it.selected.len(), top_n.min(it.candidate_count));
                prop_assert!(it.selected.windows(2).all(|w| w[0].score >= w[1].score));
                for s in &it.selected {
                    prop_assert!(touches(&s.triple(), &ends, dir), "{:?} not adjacent to {:?}", s, ends);
                    prop_assert!((-1.0..=1.0 + 1e-12).contains(&s.score));
                    prop_assert!(trace.aggregated.contains(&s.triple()));
                }
                let picked: Vec<Triple> = it.selected.iter().map(|s| s.triple()).collect();
                let next = expand(&kg, &picked, dir);
                prop_assert_eq!(it.next_subgraph_size, next.len());
                if let Some(following) = trace.iterations.get(i + 1) {
                    if !following.reseeded {
                        prop_assert_eq!(following.candidate_count, next.len());
                    }
                }
                ends = it.selected.iter().map(|s| s.triple().tail).collect();
                total += it.selected.len();
            }
            prop_assert!(trace.aggregated.len() <= total);
            prop_assert!(trace.aggregated.len() <= top_n * max_iterations);
        }
    }
}
