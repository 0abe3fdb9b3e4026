//! Retrieval stage: multi-query expansion, per-query vector search,
//! reciprocal rank fusion, reranking and few-shot example lookup.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Corpus, QaPair};
use crate::embedding::{cosine_similarity, Embedder, EmbeddingError, EmbeddingVector};
use crate::llm::{CompletionProvider, CompletionRequest, VARIANT_TEMPERATURE};
use crate::text::{normalize_for_compare, reply_lines, xml_escape};
use crate::vectorstore::{IndexedItem, ItemKind, SearchMode, SearchRequest, StoreError, VectorStore};

pub const DEFAULT_RRF_K: u32 = 60;

/// Marker opening every query-variant prompt; scripted rules can key on it.
pub const VARIANT_PROMPT_TAG: &str = "<multi-query>";

const VARIANT_SYSTEM_PROMPT: &str =
    "You rephrase student questions to improve document retrieval. Output only the rephrasings.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    #[default]
    Topk,
    Threshold,
    Mmr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub n_variants: usize,
    pub per_query_k: usize,
    pub max_context: usize,
    pub max_fewshot: usize,
    pub rrf_k: u32,
    pub search: SearchKind,
    pub score_threshold: f64,
    pub lambda: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_variants: 3,
            per_query_k: 8,
            max_context: 6,
            max_fewshot: 3,
            rrf_k: DEFAULT_RRF_K,
            search: SearchKind::Topk,
            score_threshold: 0.0,
            lambda: crate::vectorstore::DEFAULT_MMR_LAMBDA,
        }
    }
}

impl RetrievalConfig {
    fn search_mode(&self) -> SearchMode {
        match self.search {
            SearchKind::Topk => SearchMode::TopK,
            SearchKind::Threshold => SearchMode::Threshold {
                score_threshold: self.score_threshold,
            },
            SearchKind::Mmr => SearchMode::Mmr {
                lambda: self.lambda,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("the index holds no chunks")]
    EmptyStore,
    #[error("rrf constant must be positive")]
    InvalidRrfConstant,
    #[error("item `{item_id}` appears twice in the ranked list for `{query}`")]
    DuplicateWithinList { query: String, item_id: String },
    #[error("index references unknown payload `{0}`")]
    UnknownPayload(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Rephrasings of one question. `failure` is set when the provider could not
/// be used and retrieval falls back to the original question alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryVariants {
    pub original: String,
    pub variants: Vec<String>,
    pub failure: Option<String>,
}

/// Search results for one query; rank 1 is `hits[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedList {
    pub query: String,
    pub hits: Vec<String>,
}

impl RankedList {
    pub fn new(query: impl Into<String>, hits: Vec<String>) -> Self {
        Self {
            query: query.into(),
            hits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextChunk {
    pub chunk: Chunk,
    pub fused_score: f64,
    pub rerank_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotExample {
    pub pair: QaPair,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RetrievalTrace {
    /// Text actually sent to search: the question plus any clarification replies.
    pub query: String,
    pub variants: Vec<String>,
    pub variant_failure: Option<String>,
    /// Hit count per searched query, original first.
    pub list_sizes: Vec<usize>,
    pub fused_count: usize,
    pub rerank_failure: Option<String>,
    pub fewshot_count: usize,
}

/// Everything generation needs for one question.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalBundle {
    pub question: String,
    /// Sorted by `rerank_score` descending.
    pub context_chunks: Vec<ContextChunk>,
    pub fewshot_examples: Vec<FewShotExample>,
    pub trace: RetrievalTrace,
}

impl RetrievalBundle {
    pub fn chunk_ids(&self) -> impl Iterator<Item = &str> {
        self.context_chunks.iter().map(|c| c.chunk.id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RerankError {
    #[error("reranker unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("malformed reranker response: {0}")]
    ProviderMalformedResponse(String),
}

/// Scores (question, chunk) pairs directly, one score in [0, 1] per candidate.
pub trait RerankScorer: Send + Sync {
    fn score(&self, query: &str, candidates: &[&Chunk]) -> Result<Vec<f64>, RerankError>;
}

impl<R: RerankScorer + ?Sized> RerankScorer for alloc::sync::Arc<R> {
    fn score(&self, query: &str, candidates: &[&Chunk]) -> Result<Vec<f64>, RerankError> {
        (**self).score(query, candidates)
    }
}

/// Offline scorer mapping embedding cosine similarity from [-1, 1] onto [0, 1].
#[derive(Debug, Clone)]
pub struct EmbeddingScorer<E> {
    embedder: E,
}

impl<E: Embedder> EmbeddingScorer<E> {
    pub fn new(embedder: E) -> Self {
        Self { embedder }
    }
}

impl<E: Embedder> RerankScorer for EmbeddingScorer<E> {
    fn score(&self, query: &str, candidates: &[&Chunk]) -> Result<Vec<f64>, RerankError> {
        let mut texts: Vec<&str> = Vec::with_capacity(candidates.len() + 1);
        texts.push(query);
        texts.extend(candidates.iter().map(|c| c.text.as_str()));
        let vectors = self
            .embedder
            .embed_batch(&texts)
            .map_err(|e| RerankError::ProviderUnreachable(format!("{e}")))?;
        let (query_vec, docs) = vectors
            .split_first()
            .ok_or_else(|| RerankError::ProviderMalformedResponse("no vectors".into()))?;
        docs.iter()
            .map(|d| {
                cosine_similarity(query_vec, d)
                    .map(|c| (c + 1.0) / 2.0)
                    .map_err(|e| RerankError::ProviderMalformedResponse(format!("{e}")))
            })
            .collect()
    }
}

/// Text embedded for a chunk: its title followed by the body.
pub fn chunk_embedding_text(chunk: &Chunk) -> String {
    if chunk.title.is_empty() {
        chunk.text.clone()
    } else {
        format!("{}\n{}", chunk.title, chunk.text)
    }
}

pub fn chunk_item_id(chunk_id: &str) -> String {
    format!("chunk:{chunk_id}")
}

pub fn qa_item_id(qa_id: &str) -> String {
    format!("qa:{qa_id}")
}

/// Embeds every chunk and Q&A question of `corpus` into a fresh store.
pub fn build_index(corpus: &Corpus, embedder: &dyn Embedder) -> Result<VectorStore, RetrievalError> {
    let chunks: Vec<&Chunk> = corpus.chunks().collect();
    let pairs: Vec<&QaPair> = corpus.qa_pairs().collect();
    let chunk_texts: Vec<String> = chunks.iter().map(|c| chunk_embedding_text(c)).collect();
    let mut texts: Vec<&str> = chunk_texts.iter().map(String::as_str).collect();
    texts.extend(pairs.iter().map(|p| p.question.as_str()));

    if texts.is_empty() {
        return Ok(VectorStore::new(embedder.dimension().unwrap_or(0)));
    }
    let vectors = embedder.embed_batch(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::ProviderMalformedResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        ))
        .into());
    }
    let mut store = VectorStore::new(vectors[0].dimension());
    let mut vectors = vectors.into_iter();
    let mut items = Vec::with_capacity(texts.len());
    for chunk in chunks {
        items.push(IndexedItem {
            item_id: chunk_item_id(&chunk.id),
            kind: ItemKind::Chunk,
            vector: vectors.next().expect("length checked"),
            payload_ref: chunk.id.clone(),
        });
    }
    for pair in pairs {
        items.push(IndexedItem {
            item_id: qa_item_id(&pair.id),
            kind: ItemKind::Qa,
            vector: vectors.next().expect("length checked"),
            payload_ref: pair.id.clone(),
        });
    }
    store.upsert(items)?;
    Ok(store)
}

pub fn variant_prompt(question: &str, n: usize) -> String {
    format!(
        "{VARIANT_PROMPT_TAG}\n<instructions>Write {n} different rephrasings of the question below that \
         could help find relevant regulation passages. Put each rephrasing on its own line with no \
         numbering or commentary.</instructions>\n<original-question>{}</original-question>\n</multi-query>",
        xml_escape(question)
    )
}

/// Asks the provider for `n` rephrasings and keeps distinct ones that differ
/// from the original after case and whitespace normalization. Provider
/// failures degrade to an empty variant list.
pub fn generate_query_variants(question: &str, n: usize, llm: &dyn CompletionProvider) -> QueryVariants {
    let mut out = QueryVariants {
        original: question.into(),
        variants: Vec::new(),
        failure: None,
    };
    if n == 0 {
        return out;
    }
    let req = CompletionRequest::new(VARIANT_SYSTEM_PROMPT, variant_prompt(question, n))
        .with_temperature(VARIANT_TEMPERATURE);
    let reply = match llm.complete(&req) {
        Ok(reply) => reply,
        Err(e) => {
            out.failure = Some(format!("{e}"));
            return out;
        }
    };
    let mut seen = BTreeSet::new();
    seen.insert(normalize_for_compare(question));
    for line in reply_lines(&reply) {
        if out.variants.len() == n {
            break;
        }
        if seen.insert(normalize_for_compare(&line)) {
            out.variants.push(line);
        }
    }
    if out.variants.is_empty() {
        out.failure = Some("provider returned no usable rephrasing".into());
    }
    out
}

/// Reciprocal rank fusion: each item scores `sum 1 / (k_const + rank)` over the
/// lists containing it, with 1-based ranks. Output is sorted by score
/// descending, then id ascending.
pub fn rrf_fuse(lists: &[RankedList], k_const: u32) -> Result<Vec<(String, f64)>, RetrievalError> {
    if k_const == 0 {
        return Err(RetrievalError::InvalidRrfConstant);
    }
    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in lists {
        let mut seen = BTreeSet::new();
        for (idx, id) in list.hits.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateWithinList {
                    query: list.query.clone(),
                    item_id: id.clone(),
                });
            }
            ranks.entry(id.as_str()).or_default().push(idx + 1);
        }
    }
    let k = f64::from(k_const);
    let mut fused: Vec<(String, f64)> = ranks
        .into_iter()
        .map(|(id, mut item_ranks)| {
            // Summing in rank order makes the score independent of list order.
            item_ranks.sort_unstable();
            let score = item_ranks.iter().map(|r| 1.0 / (k + *r as f64)).sum();
            (id.into(), score)
        })
        .collect();
    fused.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(fused)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub scored: Vec<(Chunk, f64)>,
    pub failure: Option<String>,
}

/// Rescores candidates (given in fused order) with `scorer` and sorts them by
/// score descending; equal scores keep fused order. If the scorer fails or
/// returns unusable scores, the fused order is kept and each candidate gets
/// `(n - position) / n`.
pub fn rerank(question: &str, candidates: Vec<Chunk>, scorer: &dyn RerankScorer) -> Reranked {
    if candidates.is_empty() {
        return Reranked {
            scored: Vec::new(),
            failure: None,
        };
    }
    let refs: Vec<&Chunk> = candidates.iter().collect();
    let result = scorer.score(question, &refs).and_then(|scores| {
        if scores.len() != candidates.len() {
            return Err(RerankError::ProviderMalformedResponse(format!(
                "expected {} scores, got {}",
                candidates.len(),
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(RerankError::ProviderMalformedResponse(format!(
                "score {bad} outside [0, 1]"
            )));
        }
        Ok(scores)
    });
    match result {
        Ok(scores) => {
            let mut scored: Vec<(Chunk, f64)> = candidates.into_iter().zip(scores).collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
            Reranked {
                scored,
                failure: None,
            }
        }
        Err(e) => {
            let n = candidates.len() as f64;
            let scored = candidates
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, (n - i as f64) / n))
                .collect();
            Reranked {
                scored,
                failure: Some(format!("{e}")),
            }
        }
    }
}

fn fewshot_for_vector(
    query: EmbeddingVector,
    store: &VectorStore,
    corpus: &Corpus,
    m: usize,
) -> Result<Vec<FewShotExample>, RetrievalError> {
    if m == 0 || store.count_kind(ItemKind::Qa) == 0 {
        return Ok(Vec::new());
    }
    let hits = store.search(&SearchRequest::top_k(query, m).with_kind(ItemKind::Qa))?;
    hits.into_iter()
        .map(|hit| {
            let payload = &store.get(&hit.item_id).expect("hit comes from store").payload_ref;
            let pair = corpus
                .qa(payload)
                .ok_or_else(|| RetrievalError::UnknownPayload(payload.clone()))?;
            Ok(FewShotExample {
                pair: pair.clone(),
                score: hit.score,
            })
        })
        .collect()
}

/// The `m` indexed Q&A pairs whose questions are most similar to `question`.
pub fn retrieve_fewshot(
    question: &str,
    store: &VectorStore,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    m: usize,
) -> Result<Vec<FewShotExample>, RetrievalError> {
    if m == 0 || store.count_kind(ItemKind::Qa) == 0 {
        return Ok(Vec::new());
    }
    fewshot_for_vector(embedder.embed(question)?, store, corpus, m)
}

/// Borrowed collaborators for one retrieval.
#[derive(Clone, Copy)]
pub struct RetrievalDeps<'a> {
    pub store: &'a VectorStore,
    pub corpus: &'a Corpus,
    pub embedder: &'a dyn Embedder,
    pub llm: &'a dyn CompletionProvider,
    pub reranker: &'a dyn RerankScorer,
    pub config: &'a RetrievalConfig,
}

pub fn retrieve_bundle(question: &str, deps: &RetrievalDeps<'_>) -> Result<RetrievalBundle, RetrievalError> {
    retrieve_bundle_with_context(question, &[], deps)
}

/// Runs the full retrieval stage. `extra_context` (clarification replies) is
/// appended to the question to form the search query; the bundle keeps the
/// bare question.
pub fn retrieve_bundle_with_context(
    question: &str,
    extra_context: &[String],
    deps: &RetrievalDeps<'_>,
) -> Result<RetrievalBundle, RetrievalError> {
    if question.trim().is_empty() {
        return Err(RetrievalError::EmptyQuestion);
    }
    if deps.store.count_kind(ItemKind::Chunk) == 0 {
        return Err(RetrievalError::EmptyStore);
    }
    let config = deps.config;

    let mut query = String::from(question.trim());
    for extra in extra_context.iter().map(|e| e.trim()).filter(|e| !e.is_empty()) {
        query.push(' ');
        query.push_str(extra);
    }

    let variants = generate_query_variants(&query, config.n_variants, deps.llm);
    let mut queries: Vec<&str> = Vec::with_capacity(1 + variants.variants.len());
    queries.push(&query);
    queries.extend(variants.variants.iter().map(String::as_str));
    let vectors = deps.embedder.embed_batch(&queries)?;
    if vectors.len() != queries.len() {
        return Err(EmbeddingError::ProviderMalformedResponse(format!(
            "expected {} vectors, got {}",
            queries.len(),
            vectors.len()
        ))
        .into());
    }

    let mut lists = Vec::with_capacity(queries.len());
    for (text, vector) in queries.iter().zip(&vectors) {
        let req = SearchRequest {
            query_vector: vector.clone(),
            mode: config.search_mode(),
            k: config.per_query_k.max(1),
            kind_filter: Some(ItemKind::Chunk),
        };
        let hits = deps
            .store
            .search(&req)?
            .into_iter()
            .map(|h| deps.store.get(&h.item_id).expect("hit comes from store").payload_ref.clone())
            .collect();
        lists.push(RankedList::new(*text, hits));
    }

    let fused = rrf_fuse(&lists, config.rrf_k)?;
    let fused_count = fused.len();
    let top: Vec<(String, f64)> = fused.into_iter().take(config.max_context).collect();
    let mut candidates = Vec::with_capacity(top.len());
    for (id, _) in &top {
        let chunk = deps
            .corpus
            .chunk(id)
            .ok_or_else(|| RetrievalError::UnknownPayload(id.clone()))?;
        candidates.push(chunk.clone());
    }
    let fused_scores: BTreeMap<String, f64> = top.into_iter().collect();
    let reranked = rerank(&query, candidates, deps.reranker);
    let context_chunks = reranked
        .scored
        .into_iter()
        .map(|(chunk, rerank_score)| ContextChunk {
            fused_score: fused_scores[&chunk.id],
            chunk,
            rerank_score,
        })
        .collect();

    let fewshot_examples = fewshot_for_vector(
        vectors.into_iter().next().expect("original query embedded"),
        deps.store,
        deps.corpus,
        config.max_fewshot,
    )?;

    Ok(RetrievalBundle {
        question: question.trim().into(),
        context_chunks,
        trace: RetrievalTrace {
            query,
            variants: variants.variants,
            variant_failure: variants.failure,
            list_sizes: lists.iter().map(|l| l.hits.len()).collect(),
            fused_count,
            rerank_failure: reranked.failure,
            fewshot_count: fewshot_examples.len(),
        },
        fewshot_examples,
    })
}
