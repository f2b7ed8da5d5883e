//! In-memory knowledge graph: triple ingestion, label tables, adjacency
//! indexes and subgraph construction.
//!
//! Triples live in one insertion-ordered vector; both adjacency indexes store
//! positions into that vector, so a [`Subgraph`] is just an ordered set of
//! [`TripleId`]s borrowed against its parent graph.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: malformed line {content:?}: {reason}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        content: String,
        reason: String,
    },
    #[error("invalid identifier {0:?}: must be non-empty and contain no tab or newline")]
    InvalidId(String),
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self, StoreError> {
                let id = id.into();
                if valid_token(&id) {
                    Ok(Self(id))
                } else {
                    Err(StoreError::InvalidId(id))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = StoreError;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                Self::new(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

id_newtype!(
    /// Opaque entity token such as `Q29`.
    EntityId
);
id_newtype!(
    /// Opaque relation token such as `P47`.
    RelationId
);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// Builds a triple from raw tokens, validating each.
    pub fn parse(head: &str, relation: &str, tail: &str) -> Result<Self, StoreError> {
        Ok(Self::new(
            EntityId::new(head)?,
            RelationId::new(relation)?,
            EntityId::new(tail)?,
        ))
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Position of a triple inside its [`KnowledgeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outgoing,
    Incoming,
    #[default]
    Both,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outgoing" => Ok(Self::Outgoing),
            "incoming" => Ok(Self::Incoming),
            "both" => Ok(Self::Both),
            other => Err(format!(
                "unknown direction {other:?} (expected outgoing, incoming or both)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphFormat {
    #[default]
    TsvTriples,
}

/// Line statistics gathered while loading a triple file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadStats {
    pub parsed_lines: usize,
    pub duplicate_lines: usize,
    pub label_lines: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    triple_set: HashMap<Triple, TripleId>,
    entity_labels: HashMap<EntityId, String>,
    relation_labels: HashMap<RelationId, String>,
    out_index: HashMap<EntityId, Vec<TripleId>>,
    in_index: HashMap<EntityId, Vec<TripleId>>,
    relations: HashSet<RelationId>,
    stats: LoadStats,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from triples in order, collapsing duplicates.
    pub fn from_triples<I>(triples: I) -> Self
    where
        I: IntoIterator<Item = Triple>,
    {
        let mut kg = Self::new();
        for t in triples {
            kg.stats.parsed_lines += 1;
            if !kg.insert(t) {
                kg.stats.duplicate_lines += 1;
            }
        }
        kg
    }

    /// Returns false when the triple was already present.
    fn insert(&mut self, triple: Triple) -> bool {
        if self.triple_set.contains_key(&triple) {
            return false;
        }
        let id = TripleId(self.triples.len());
        self.out_index
            .entry(triple.head.clone())
            .or_default()
            .push(id);
        self.in_index
            .entry(triple.tail.clone())
            .or_default()
            .push(id);
        self.relations.insert(triple.relation.clone());
        self.triple_set.insert(triple.clone(), id);
        self.triples.push(triple);
        true
    }

    /// Registers a display label. Ids are looked up as both entity and
    /// relation, since the label file does not distinguish them.
    pub fn set_label(&mut self, id: &str, label: impl Into<String>) -> Result<(), StoreError> {
        let label = label.into();
        self.entity_labels.insert(EntityId::new(id)?, label.clone());
        self.relation_labels.insert(RelationId::new(id)?, label);
        Ok(())
    }

    pub fn with_labels<'a, I>(mut self, labels: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (id, label) in labels {
            self.set_label(id, label)?;
        }
        Ok(self)
    }

    /// Appends another graph's triples and labels. Triples already present
    /// count as duplicates; labels from `other` win.
    pub fn merge(&mut self, other: KnowledgeGraph) {
        self.stats.parsed_lines += other.stats.parsed_lines;
        self.stats.duplicate_lines += other.stats.duplicate_lines;
        self.stats.label_lines += other.stats.label_lines;
        for t in other.triples {
            if !self.insert(t) {
                self.stats.duplicate_lines += 1;
            }
        }
        self.entity_labels.extend(other.entity_labels);
        self.relation_labels.extend(other.relation_labels);
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: TripleId) -> &Triple {
        &self.triples[id.0]
    }

    pub fn id_of(&self, triple: &Triple) -> Option<TripleId> {
        self.triple_set.get(triple).copied()
    }

    pub fn stats(&self) -> LoadStats {
        self.stats
    }

    pub fn entity_count(&self) -> usize {
        let mut seen: HashSet<&EntityId> = self.out_index.keys().collect();
        seen.extend(self.in_index.keys());
        seen.len()
    }

    pub fn relation_count(&self) -> usize {
        self.triples
            .iter()
            .map(|t| &t.relation)
            .collect::<HashSet<_>>()
            .len()
    }

    /// True for ids used as head or tail, and for labelled ids that are
    /// never used as a relation.
    pub fn contains_entity(&self, entity: &EntityId) -> bool {
        self.out_index.contains_key(entity)
            || self.in_index.contains_key(entity)
            || (self.entity_labels.contains_key(entity)
                && !self.relations.contains(entity.as_str()))
    }

    pub fn entity_label(&self, entity: &EntityId) -> Option<&str> {
        self.entity_labels.get(entity).map(String::as_str)
    }

    pub fn relation_label(&self, relation: &RelationId) -> Option<&str> {
        self.relation_labels.get(relation).map(String::as_str)
    }

    /// All known entity labels, in no particular order.
    pub fn entity_labels(&self) -> impl Iterator<Item = (&EntityId, &str)> {
        self.entity_labels.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Ids of entities carrying exactly this label, sorted.
    pub fn entities_labelled(&self, label: &str) -> Vec<EntityId> {
        let mut ids: Vec<EntityId> = self
            .entity_labels
            .iter()
            .filter(|(id, l)| l.as_str() == label && self.contains_entity(id))
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }

    pub fn outgoing(&self, entity: &EntityId) -> &[TripleId] {
        self.out_index.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn incoming(&self, entity: &EntityId) -> &[TripleId] {
        self.in_index.get(entity).map_or(&[], Vec::as_slice)
    }

    /// Triple positions incident to `entity`. For `Both`, outgoing come first
    /// and self-loops are reported once.
    pub fn neighbor_ids(&self, entity: &EntityId, direction: Direction) -> Vec<TripleId> {
        match direction {
            Direction::Outgoing => self.outgoing(entity).to_vec(),
            Direction::Incoming => self.incoming(entity).to_vec(),
            Direction::Both => {
                let out = self.outgoing(entity);
                let mut ids = out.to_vec();
                ids.extend(
                    self.incoming(entity)
                        .iter()
                        .filter(|id| self.triple(**id).head != *entity),
                );
                ids
            }
        }
    }

    pub fn neighbors(&self, entity: &EntityId, direction: Direction) -> Vec<&Triple> {
        self.neighbor_ids(entity, direction)
            .into_iter()
            .map(|id| self.triple(id))
            .collect()
    }

    /// Renders a triple as `head, relation, tail` using labels, falling back
    /// to the raw id where a label is missing.
    pub fn verbalize(&self, triple: &Triple) -> String {
        let head = self
            .entity_label(&triple.head)
            .unwrap_or(triple.head.as_str());
        let rel = self
            .relation_label(&triple.relation)
            .unwrap_or(triple.relation.as_str());
        let tail = self
            .entity_label(&triple.tail)
            .unwrap_or(triple.tail.as_str());
        format!("{head}, {rel}, {tail}")
    }

    /// Union of the neighborhoods of `entities`, first-insertion order.
    pub fn seed_subgraph(&self, entities: &[EntityId], direction: Direction) -> Subgraph {
        let mut sg = Subgraph::new();
        for e in entities {
            sg.extend(self.neighbor_ids(e, direction));
        }
        sg
    }
}

/// Ordered, duplicate-free set of triples drawn from one graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Subgraph {
    ids: Vec<TripleId>,
    members: HashSet<TripleId>,
}

impl Subgraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when `id` was already present.
    pub fn insert(&mut self, id: TripleId) -> bool {
        if self.members.insert(id) {
            self.ids.push(id);
            true
        } else {
            false
        }
    }

    pub fn extend<I: IntoIterator<Item = TripleId>>(&mut self, ids: I) {
        for id in ids {
            self.insert(id);
        }
    }

    pub fn ids(&self) -> &[TripleId] {
        &self.ids
    }

    pub fn contains(&self, id: TripleId) -> bool {
        self.members.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn triples<'a>(&'a self, kg: &'a KnowledgeGraph) -> impl Iterator<Item = &'a Triple> + 'a {
        self.ids.iter().map(move |id| kg.triple(*id))
    }
}

impl FromIterator<TripleId> for Subgraph {
    fn from_iter<I: IntoIterator<Item = TripleId>>(iter: I) -> Self {
        let mut sg = Subgraph::new();
        sg.extend(iter);
        sg
    }
}

/// Companion label file for a triple file: `graph.tsv` → `graph.labels`.
pub fn labels_path_for(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            StoreError::NotFound(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Yields `(1-based line number, content)` for data lines, skipping blanks
/// and `#` comments.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Loads a triple file and, when present, its companion `.labels` file.
pub fn load_graph(path: &Path, format: GraphFormat) -> Result<KnowledgeGraph, StoreError> {
    let GraphFormat::TsvTriples = format;
    let text = read_text(path)?;
    let malformed = |line: usize, content: &str, reason: String| StoreError::MalformedLine {
        path: path.to_path_buf(),
        line,
        content: content.to_string(),
        reason,
    };

    let mut kg = KnowledgeGraph::new();
    for (lineno, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [head, rel, tail] = fields[..] else {
            return Err(malformed(
                lineno,
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        };
        let triple =
            Triple::parse(head, rel, tail).map_err(|e| malformed(lineno, line, e.to_string()))?;
        kg.stats.parsed_lines += 1;
        if !kg.insert(triple) {
            kg.stats.duplicate_lines += 1;
        }
    }

    let labels = labels_path_for(path);
    if labels != path && labels.exists() {
        let text = read_text(&labels)?;
        for (lineno, line) in data_lines(&text) {
            let Some((id, label)) = line.split_once('\t') else {
                return Err(StoreError::MalformedLine {
                    path: labels.clone(),
                    line: lineno,
                    content: line.to_string(),
                    reason: "expected id<TAB>label".into(),
                });
            };
            kg.set_label(id, label)
                .map_err(|e| StoreError::MalformedLine {
                    path: labels.clone(),
                    line: lineno,
                    content: line.to_string(),
                    reason: e.to_string(),
                })?;
            kg.stats.label_lines += 1;
        }
    }

    log::info!(
        "loaded {} triples from {} ({} duplicate lines collapsed)",
        kg.len(),
        path.display(),
        kg.stats.duplicate_lines
    );
    Ok(kg)
}
