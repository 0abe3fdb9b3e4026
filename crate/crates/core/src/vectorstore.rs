//! Exact in-memory vector index over chunks and Q&A questions.
//!
//! Three search modes are supported: plain top-k by cosine similarity, a
//! similarity score threshold (capped at k), and maximal marginal relevance.
//! All orderings break score ties by `item_id` ascending so results are
//! reproducible. MMR first prefers the less redundant candidate on an
//! objective tie, then falls back to the id.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_slices, EmbeddingError, EmbeddingVector};

/// Default MMR trade-off between query relevance and redundancy.
pub const DEFAULT_MMR_LAMBDA: f64 = 0.5;
/// MMR considers the `MMR_POOL_FACTOR * k` most similar items as candidates.
pub const MMR_POOL_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Chunk,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedItem {
    pub item_id: String,
    pub kind: ItemKind,
    pub vector: EmbeddingVector,
    /// Chunk id or Q&A id this vector was computed from.
    pub payload_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchMode {
    TopK,
    /// Every item scoring at least `score_threshold`, capped at k.
    Threshold { score_threshold: f64 },
    /// Greedy maximal marginal relevance with trade-off `lambda` in [0, 1].
    Mmr { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest {
    pub query_vector: EmbeddingVector,
    pub mode: SearchMode,
    pub k: usize,
    pub kind_filter: Option<ItemKind>,
}

impl SearchRequest {
    pub fn top_k(query_vector: EmbeddingVector, k: usize) -> Self {
        Self {
            query_vector,
            mode: SearchMode::TopK,
            k,
            kind_filter: None,
        }
    }

    pub fn with_mode(mut self, mode: SearchMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_kind(mut self, kind: ItemKind) -> Self {
        self.kind_filter = Some(kind);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub item_id: String,
    /// Cosine similarity between the query and the item.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("dimension mismatch: store has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid search request: {0}")]
    InvalidRequest(&'static str),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

impl From<EmbeddingError> for StoreError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimensionMismatch { expected, actual } => {
                StoreError::DimensionMismatch { expected, actual }
            }
            other => StoreError::CorruptSnapshot(alloc::format!("{other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dimension: usize,
    items: BTreeMap<String, IndexedItem>,
}

/// Serialized form of a [`VectorStore`]: `{"dimension": D, "items": [...]}`,
/// items sorted by `item_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub dimension: usize,
    pub items: Vec<IndexedItem>,
}

fn by_score_then_id(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.item_id.cmp(&b.item_id))
}

impl VectorStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            items: BTreeMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_kind(&self, kind: ItemKind) -> usize {
        self.items.values().filter(|i| i.kind == kind).count()
    }

    pub fn get(&self, item_id: &str) -> Option<&IndexedItem> {
        self.items.get(item_id)
    }

    pub fn items(&self) -> impl Iterator<Item = &IndexedItem> {
        self.items.values()
    }

    /// Inserts or overwrites items by `item_id` and returns the resulting store size.
    /// Either every item is applied or, on a dimension mismatch, none is.
    pub fn upsert(&mut self, items: Vec<IndexedItem>) -> Result<usize, StoreError> {
        if let Some(bad) = items.iter().find(|i| i.vector.dimension() != self.dimension) {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: bad.vector.dimension(),
            });
        }
        for item in items {
            self.items.insert(item.item_id.clone(), item);
        }
        Ok(self.items.len())
    }

    /// Every eligible item scored against the query, best first.
    fn ranked(&self, req: &SearchRequest) -> Result<Vec<(ScoredHit, &IndexedItem)>, StoreError> {
        let query = req.query_vector.values();
        let mut scored = Vec::with_capacity(self.items.len());
        for item in self.items.values() {
            if req.kind_filter.is_some_and(|k| k != item.kind) {
                continue;
            }
            let score = cosine_slices(query, item.vector.values())?;
            scored.push((
                ScoredHit {
                    item_id: item.item_id.clone(),
                    score,
                },
                item,
            ));
        }
        scored.sort_by(|a, b| by_score_then_id(&a.0, &b.0));
        Ok(scored)
    }

    pub fn search(&self, req: &SearchRequest) -> Result<Vec<ScoredHit>, StoreError> {
        if req.k == 0 {
            return Err(StoreError::InvalidRequest("k must be positive"));
        }
        if req.query_vector.dimension() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: req.query_vector.dimension(),
            });
        }
        match req.mode {
            SearchMode::Threshold { score_threshold } if !(-1.0..=1.0).contains(&score_threshold) => {
                return Err(StoreError::InvalidRequest("score_threshold must lie in [-1, 1]"))
            }
            SearchMode::Mmr { lambda } if !(0.0..=1.0).contains(&lambda) => {
                return Err(StoreError::InvalidRequest("lambda must lie in [0, 1]"))
            }
            _ => {}
        }
        if self.items.is_empty() {
            return Ok(Vec::new());
        }

        let ranked = self.ranked(req)?;
        let hits = match req.mode {
            SearchMode::TopK => ranked.into_iter().take(req.k).map(|(h, _)| h).collect(),
            SearchMode::Threshold { score_threshold } => ranked
                .into_iter()
                .take_while(|(h, _)| h.score >= score_threshold)
                .take(req.k)
                .map(|(h, _)| h)
                .collect(),
            SearchMode::Mmr { lambda } => {
                let pool: Vec<_> = ranked
                    .into_iter()
                    .take(req.k.saturating_mul(MMR_POOL_FACTOR))
                    .collect();
                mmr_select(pool, req.k, lambda)?
            }
        };
        Ok(hits)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot {
            dimension: self.dimension,
            items: self.items.values().cloned().collect(),
        }
    }

    pub fn from_snapshot(snapshot: Snapshot) -> Result<Self, StoreError> {
        let mut store = Self::new(snapshot.dimension);
        for item in snapshot.items {
            if item.vector.dimension() != snapshot.dimension {
                return Err(StoreError::CorruptSnapshot(alloc::format!(
                    "item `{}` has dimension {}, snapshot declares {}",
                    item.item_id,
                    item.vector.dimension(),
                    snapshot.dimension
                )));
            }
            if store.items.contains_key(&item.item_id) {
                return Err(StoreError::CorruptSnapshot(alloc::format!(
                    "duplicate item `{}`",
                    item.item_id
                )));
            }
            store.items.insert(item.item_id.clone(), item);
        }
        Ok(store)
    }

    /// Pretty-printed JSON snapshot with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.to_snapshot()).expect("snapshot serializes");
        out.push('\n');
        out
    }

    pub fn from_json(source: &str) -> Result<Self, StoreError> {
        let snapshot: Snapshot = serde_json::from_str(source)
            .map_err(|e| StoreError::CorruptSnapshot(alloc::format!("{e}")))?;
        Self::from_snapshot(snapshot)
    }
}

/// Greedy MMR over a similarity-ranked candidate pool. The first pick is the
/// most similar candidate; each later pick maximizes
/// `lambda * sim(query, d) - (1 - lambda) * max_s sim(d, s)` over the selected set.
fn mmr_select(
    pool: Vec<(ScoredHit, &IndexedItem)>,
    k: usize,
    lambda: f64,
) -> Result<Vec<ScoredHit>, StoreError> {
    let mut remaining = pool;
    let mut selected: Vec<(ScoredHit, &IndexedItem)> = Vec::with_capacity(k);
    // Max similarity of each remaining candidate to anything already selected.
    let mut redundancy: Vec<f64> = alloc::vec![f64::NEG_INFINITY; remaining.len()];

    while selected.len() < k && !remaining.is_empty() {
        let pick = if selected.is_empty() {
            0
        } else {
            let mut best = 0;
            let mut best_value = f64::NEG_INFINITY;
            for (idx, (hit, _)) in remaining.iter().enumerate() {
                let value = lambda * hit.score - (1.0 - lambda) * redundancy[idx];
                let better = value > best_value
                    || (value == best_value
                        && (redundancy[idx] < redundancy[best]
                            || (redundancy[idx] == redundancy[best]
                                && hit.item_id < remaining[best].0.item_id)));
                if better {
                    best = idx;
                    best_value = value;
                }
            }
            best
        };
        let chosen = remaining.remove(pick);
        redundancy.remove(pick);
        for (idx, (_, candidate)) in remaining.iter().enumerate() {
            let sim = cosine_slices(chosen.1.vector.values(), candidate.vector.values())?;
            if sim > redundancy[idx] {
                redundancy[idx] = sim;
            }
        }
        selected.push(chosen);
    }
    Ok(selected.into_iter().map(|(h, _)| h).collect())
}
