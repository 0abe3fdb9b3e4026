//! Core of a grounded question-answering assistant.
//!
//! Everything in this crate is pure computation over in-memory data: chunk
//! and dataset parsing from strings, a deterministic hashing embedder, an
//! exact in-memory vector index (top-k, score threshold and MMR search),
//! multi-query retrieval with reciprocal rank fusion and reranking, XML
//! prompt assembly, the self-reflection state machine and the evaluation
//! metrics. Model access goes through the [`llm::CompletionProvider`],
//! [`embedding::Embedder`] and [`retrieval::RerankScorer`] traits; network
//! and file IO live in the companion `va` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod embedding;
pub mod generation;
pub mod llm;
pub mod metrics;
pub mod reflection;
pub mod retrieval;
pub mod text;
pub mod vectorstore;

pub use corpus::{Chunk, EvalCase, QaPair};
pub use embedding::{cosine_similarity, hash_embed, Embedder, EmbeddingVector, HashEmbedder};
pub use llm::{CompletionProvider, CompletionRequest, ScriptedProvider};
pub use retrieval::{rrf_fuse, RankedList, RetrievalBundle, RetrievalConfig};
pub use vectorstore::{ScoredHit, SearchMode, SearchRequest, VectorStore};

/// Monotonic millisecond clock used for latency bookkeeping.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// A clock that never advances. Makes latency fields reproducible in fixtures.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock(pub u64);

impl Clock for FrozenClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}
