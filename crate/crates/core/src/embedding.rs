//! Text embeddings, cosine similarity and top-N triple ranking.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg_store::{KnowledgeGraph, Subgraph, Triple, TripleId};
use crate::llm_client::transport::{HttpTransport, RetryPolicy, TransportError};

pub const DEFAULT_BOW_DIMENSION: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector cannot be compared")]
    ZeroNorm,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("empty embedding vector")]
    Empty,
    #[error("embedding backend error: {0}")]
    Backend(String),
    #[error("embedding cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }
}

/// `(u·v) / (‖u‖‖v‖)`. Zero-norm inputs are an error, never NaN.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::LengthMismatch(u.len(), v.len()));
    }
    let (dot, uu, vv) = u
        .values()
        .iter()
        .zip(v.values())
        .fold((0.0, 0.0, 0.0), |(d, a, b), (x, y)| {
            (d + x * y, a + x * x, b + y * y)
        });
    if uu == 0.0 || vv == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    let cos = dot / (uu.sqrt() * vv.sqrt());
    Ok(cos.clamp(-1.0, 1.0))
}

/// A text embedding backend. Implementations must be deterministic for a
/// fixed input and safe to call concurrently.
pub trait Embedder: Send + Sync {
    /// Stable identifier, used as part of cache keys.
    fn id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    /// Embeds `texts` in order. Backends with batch endpoints override this.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Feature-hashed bag of words with count weights. Buckets come from 64-bit
/// FNV-1a over the token's UTF-8 bytes, so vectors are identical on every
/// platform.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dimension: usize,
    id: String,
}

impl HashedBowEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            id: format!("hashed_bow/{dimension}"),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Raw count vector; all-zero for text without tokens.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for tok in tokenize(text) {
            let mut h = fnv::FnvHasher::default();
            h.write(tok.as_bytes());
            v[(h.finish() % self.dimension as u64) as usize] += 1.0;
        }
        v
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_BOW_DIMENSION)
    }
}

impl Embedder for HashedBowEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        EmbeddingVector::new(self.counts(text))
    }
}

/// Convenience wrapper around the default [`HashedBowEmbedder`].
pub fn hashed_bow_embed(text: &str) -> EmbeddingVector {
    EmbeddingVector(HashedBowEmbedder::default().counts(text))
}

/// Embedder backed by a fixed text → vector table. Unknown text is an
/// error, which makes fixture coverage gaps visible.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    table: HashMap<String, EmbeddingVector>,
}

impl FixtureEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbedError> {
        self.table
            .insert(text.into(), EmbeddingVector::new(vector)?);
        Ok(())
    }

    /// Reads a JSON object mapping text to vector.
    pub fn from_json(json: &str) -> Result<Self, EmbedError> {
        let raw: HashMap<String, Vec<f64>> =
            serde_json::from_str(json).map_err(|e| EmbedError::Backend(e.to_string()))?;
        let mut fx = Self::new();
        for (k, v) in raw {
            fx.insert(k, v)?;
        }
        Ok(fx)
    }
}

impl Embedder for FixtureEmbedder {
    fn id(&self) -> &str {
        "fixture"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::Backend(format!("no fixture embedding for {text:?}")))
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct RemoteEmbedder {
    transport: HttpTransport,
    model: String,
    id: String,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Self {
        let model = model.into();
        Self {
            transport: HttpTransport::new(endpoint, api_key, retry, timeout, None),
            id: format!("remote/{model}"),
            model,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        v.pop()
            .ok_or_else(|| EmbedError::Backend("empty embedding response".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let req = EmbeddingRequest {
            model: &self.model,
            input: texts,
        };
        let (resp, _attempts): (EmbeddingResponse, u32) = self
            .transport
            .post_json(&req)
            .map_err(|e: TransportError| EmbedError::Backend(e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::Backend(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter()
            .map(|d| EmbeddingVector::new(d.embedding))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    backend: String,
    text: String,
    vector: Vec<f64>,
}

/// Memoizes embeddings by `(backend id, exact text)`. Optionally persisted as
/// an append-only JSON-lines file.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), EmbeddingVector>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file, replaying existing records.
    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        if let Ok(v) = EmbeddingVector::new(rec.vector) {
                            entries.entry((rec.backend, rec.text)).or_insert(v);
                        }
                    }
                    // a torn final write should not poison the whole cache
                    Err(e) => {
                        log::warn!("{}:{}: skipping cache record: {e}", path.display(), i + 1)
                    }
                }
            }
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
            ..Self::default()
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(AtomicOrdering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(AtomicOrdering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend: &str, text: &str) -> Option<EmbeddingVector> {
        let found = self
            .entries
            .read()
            .unwrap()
            .get(&(backend.to_string(), text.to_string()))
            .cloned();
        let counter = if found.is_some() {
            &self.hits
        } else {
            &self.misses
        };
        counter.fetch_add(1, AtomicOrdering::Relaxed);
        found
    }

    pub fn put(
        &self,
        backend: &str,
        text: &str,
        vector: EmbeddingVector,
    ) -> Result<(), EmbedError> {
        let key = (backend.to_string(), text.to_string());
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let rec = CacheRecord {
                backend: key.0.clone(),
                text: key.1.clone(),
                vector: vector.values().to_vec(),
            };
            let mut line = serde_json::to_string(&rec).expect("cache record serializes");
            line.push('\n');
            file.lock().unwrap().write_all(line.as_bytes())?;
        }
        entries.insert(key, vector);
        Ok(())
    }
}

/// An embedder fronted by an [`EmbeddingCache`].
pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbeddingCache,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if let Some(v) = self.cache.get(self.inner.id(), text) {
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        self.cache.put(self.inner.id(), text, v.clone())?;
        Ok(v)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let id = self.inner.id();
        let mut out: Vec<Option<EmbeddingVector>> =
            texts.iter().map(|t| self.cache.get(id, t)).collect();
        let missing: Vec<&str> = texts
            .iter()
            .zip(&out)
            .filter(|(_, v)| v.is_none())
            .map(|(t, _)| *t)
            .collect();
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut fresh = missing.iter().zip(fresh);
            for (slot, text) in out.iter_mut().zip(texts) {
                if slot.is_none() {
                    let (t, v) = fresh.next().expect("one vector per missing text");
                    debug_assert_eq!(t, text);
                    self.cache.put(id, t, v.clone())?;
                    *slot = Some(v);
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

/// A triple scored against a query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriple {
    pub id: TripleId,
    pub triple: Triple,
    pub text: String,
    pub score: f64,
}

/// Descending score, then subgraph position, then verbalization.
pub(crate) fn rank_order(a: (&f64, usize, &str), b: (&f64, usize, &str)) -> Ordering {
    b.0.total_cmp(a.0)
        .then(a.1.cmp(&b.1))
        .then_with(|| a.2.cmp(b.2))
}

/// Scores every subgraph triple against each query vector, keeping the best
/// score per triple, and returns the top `n`.
pub(crate) fn rank_by_queries<E: Embedder + ?Sized>(
    queries: &[EmbeddingVector],
    subgraph: &Subgraph,
    kg: &KnowledgeGraph,
    embedder: &E,
    n: usize,
) -> Result<Vec<ScoredTriple>, EmbedError> {
    assert!(n >= 1, "top-n must be at least 1");
    if subgraph.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = subgraph.triples(kg).map(|t| kg.verbalize(t)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_batch(&refs)?;

    let mut scored = Vec::with_capacity(texts.len());
    for ((id, text), vector) in subgraph.ids().iter().zip(texts).zip(&vectors) {
        let mut best = f64::NEG_INFINITY;
        for q in queries {
            best = best.max(cosine_similarity(q, vector)?);
        }
        scored.push(ScoredTriple {
            id: *id,
            triple: kg.triple(*id).clone(),
            text,
            score: best,
        });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        rank_order(
            (&scored[a].score, a, &scored[a].text),
            (&scored[b].score, b, &scored[b].text),
        )
    });
    order.truncate(n);
    let mut slots: Vec<Option<ScoredTriple>> = scored.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().expect("each index once"))
        .collect())
}

/// Ranks the subgraph's triples against `query`, returning at most `n`
/// entries with non-increasing scores.
pub fn rank_triples<E: Embedder + ?Sized>(
    query: &str,
    subgraph: &Subgraph,
    kg: &KnowledgeGraph,
    embedder: &E,
    n: usize,
) -> Result<Vec<ScoredTriple>, EmbedError> {
    if subgraph.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.embed(query)?;
    rank_by_queries(&[q], subgraph, kg, embedder, n)
}
