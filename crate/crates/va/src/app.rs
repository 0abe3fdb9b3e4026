//! Wiring: turns a [`Config`] into providers, a loaded index and corpus.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use va_core::corpus::Corpus;
use va_core::embedding::EmbeddingError;
use va_core::reflection::{ReflectionConfig, ReflectionError, TurnDeps};
use va_core::retrieval::{build_index, EmbeddingScorer, RerankScorer, RetrievalDeps, RetrievalError};
use va_core::vectorstore::ItemKind;
use va_core::{Clock, CompletionProvider, Embedder, FrozenClock, HashEmbedder, RetrievalConfig, ScriptedProvider, VectorStore};

use crate::config::{ClockKind, Config, ConfigError, EmbedderKind, LlmKind, RerankerKind, API_KEY_ENV};
use crate::corpus_io::{load_qa_dataset, parse_corpus_dir, LoadError};
use crate::remote::{CallLog, Endpoint, RemoteChat, RemoteEmbedder, RemoteReranker};
use crate::snapshot::{load_snapshot, save_snapshot, SnapshotError};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("cannot read script {path}: {source}")]
    ScriptIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid script {path}: {source}")]
    ScriptParse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("cannot build HTTP client: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Turn(#[from] ReflectionError),
    #[error("index has dimension {index} but the embedder produces {embedder}")]
    DimensionMismatch { index: usize, embedder: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Milliseconds since construction, from a monotonic clock.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

pub fn clock_for(kind: ClockKind) -> Arc<dyn Clock> {
    match kind {
        ClockKind::System => Arc::new(SystemClock::new()),
        ClockKind::Frozen => Arc::new(FrozenClock(0)),
    }
}

#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub llm: Arc<dyn CompletionProvider>,
    pub reranker: Arc<dyn RerankScorer>,
    pub call_log: Arc<CallLog>,
}

fn endpoint(url: Option<&String>, what: &'static str) -> Result<Endpoint, ConfigError> {
    let url = url.ok_or(ConfigError::Missing(what))?;
    Ok(Endpoint::new(url.clone()).with_api_key(std::env::var(API_KEY_ENV).ok()))
}

pub fn build_embedder(config: &Config, log: &Arc<CallLog>) -> Result<Arc<dyn Embedder>, AppError> {
    Ok(match config.embedder.kind {
        EmbedderKind::Hash => Arc::new(HashEmbedder::new(
            config.embedder.dimension.unwrap_or(va_core::embedding::DEFAULT_HASH_DIMENSION),
        )?),
        EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(
            endpoint(config.embedder.endpoint.as_ref(), "embedder.endpoint")?,
            config.embedder.model.clone(),
            config.embedder.dimension,
            Arc::clone(log),
        )?),
    })
}

pub fn build_providers(config: &Config) -> Result<Providers, AppError> {
    let call_log = Arc::new(CallLog::default());
    let embedder = build_embedder(config, &call_log)?;
    let llm: Arc<dyn CompletionProvider> = match config.llm.kind {
        LlmKind::Scripted => match &config.llm.script_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| AppError::ScriptIo {
                    path: path.clone(),
                    source,
                })?;
                Arc::new(ScriptedProvider::from_json(&text).map_err(|source| AppError::ScriptParse {
                    path: path.clone(),
                    source,
                })?)
            }
            None => Arc::new(ScriptedProvider::new(Vec::new())),
        },
        LlmKind::Remote => Arc::new(RemoteChat::new(
            endpoint(config.llm.endpoint.as_ref(), "llm.endpoint")?,
            config.llm.model.clone(),
            config.llm.max_tokens,
            Arc::clone(&call_log),
        )?),
    };
    let reranker: Arc<dyn RerankScorer> = match config.reranker.kind {
        RerankerKind::Embedding => Arc::new(EmbeddingScorer::new(Arc::clone(&embedder))),
        RerankerKind::Remote => Arc::new(RemoteReranker::new(
            endpoint(config.reranker.endpoint.as_ref(), "reranker.endpoint")?,
            Arc::clone(&call_log),
        )?),
    };
    Ok(Providers {
        embedder,
        llm,
        reranker,
        call_log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub chunks: usize,
    pub qa_pairs: usize,
    pub items: usize,
}

/// Parses the corpus and Q&A set, embeds everything and writes the snapshot.
pub fn ingest(config: &Config) -> Result<IngestSummary, AppError> {
    let chunks = parse_corpus_dir(config.require_corpus()?)?;
    let qa = load_qa_dataset(config.require_qa()?)?;
    let index_path = config.require_index()?;
    let providers = build_providers(config)?;
    let summary = (chunks.len(), qa.len());
    let corpus = Corpus::new(chunks, qa);
    let store = build_index(&corpus, &*providers.embedder)?;
    save_snapshot(&store, index_path)?;
    Ok(IngestSummary {
        chunks: summary.0,
        qa_pairs: summary.1,
        items: store.len(),
    })
}

/// Everything a question needs: index, payloads, providers and knobs.
pub struct Pipeline {
    pub store: VectorStore,
    pub corpus: Corpus,
    pub providers: Providers,
    pub retrieval: RetrievalConfig,
    pub reflection: ReflectionConfig,
    pub clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(
        store: VectorStore,
        corpus: Corpus,
        providers: Providers,
        config: &Config,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AppError> {
        if let Some(d) = providers.embedder.dimension() {
            if d != store.dimension() {
                return Err(AppError::DimensionMismatch {
                    index: store.dimension(),
                    embedder: d,
                });
            }
        }
        Ok(Self {
            store,
            corpus,
            providers,
            retrieval: config.retrieval.clone(),
            reflection: config.reflection,
            clock,
        })
    }

    /// Loads the snapshot plus the chunk files and Q&A set that back its payloads.
    pub fn load(config: &Config, clock: Arc<dyn Clock>) -> Result<Self, AppError> {
        let store = load_snapshot(config.require_index()?)?;
        let chunks = parse_corpus_dir(config.require_corpus()?)?;
        let qa = match (&config.qa_path, store.count_kind(ItemKind::Qa)) {
            (Some(path), _) => load_qa_dataset(path)?,
            (None, 0) => Vec::new(),
            (None, _) => return Err(ConfigError::Missing("Q&A dataset (--qa)").into()),
        };
        let providers = build_providers(config)?;
        Self::new(store, Corpus::new(chunks, qa), providers, config, clock)
    }

    pub fn retrieval_deps(&self) -> RetrievalDeps<'_> {
        RetrievalDeps {
            store: &self.store,
            corpus: &self.corpus,
            embedder: &*self.providers.embedder,
            llm: &*self.providers.llm,
            reranker: &*self.providers.reranker,
            config: &self.retrieval,
        }
    }

    pub fn turn_deps(&self) -> TurnDeps<'_> {
        TurnDeps {
            retrieval: self.retrieval_deps(),
            llm: &*self.providers.llm,
            config: &self.reflection,
            clock: &*self.clock,
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), AppError> {
    std::fs::write(path, contents).map_err(|source| AppError::Io {
        path: path.to_owned(),
        source,
    })
}
