//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use va::app::{Pipeline, Providers};
use va::config::Config;
use va::corpus_io::{load_qa_dataset, parse_corpus_dir};
use va::remote::CallLog;
use va_core::corpus::Corpus;
use va_core::llm::ScriptedRule;
use va_core::reflection::ReflectionConfig;
use va_core::retrieval::{build_index, EmbeddingScorer};
use va_core::{Clock, Embedder, HashEmbedder, ScriptedProvider};

pub fn e2e_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

/// Clock whose n-th reading is `n * (n + 1) / 2` times `step` ms, so
/// consecutive intervals keep growing and turns get distinct latencies.
#[derive(Debug, Default)]
pub struct RampClock {
    calls: AtomicU64,
    step: u64,
}

impl RampClock {
    pub fn new(step: u64) -> Self {
        Self {
            calls: AtomicU64::new(0),
            step,
        }
    }
}

impl Clock for RampClock {
    fn now_ms(&self) -> u64 {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        n * (n + 1) / 2 * self.step
    }
}

/// Fixture corpus with a scripted LLM, no query variants and the given budgets.
pub fn scripted_pipeline(rules: Vec<ScriptedRule>, reflection: ReflectionConfig, clock: Arc<dyn Clock>) -> Pipeline {
    let dir = e2e_dir();
    let chunks = parse_corpus_dir(&dir.join("chunks")).unwrap();
    let qa = load_qa_dataset(&dir.join("qa.jsonl")).unwrap();
    pipeline_over(Corpus::new(chunks, qa), 256, rules, reflection, clock)
}

pub fn pipeline_over(
    corpus: Corpus,
    dimension: usize,
    rules: Vec<ScriptedRule>,
    reflection: ReflectionConfig,
    clock: Arc<dyn Clock>,
) -> Pipeline {
    let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(dimension).unwrap());
    let store = build_index(&corpus, &*embedder).unwrap();
    let providers = Providers {
        reranker: Arc::new(EmbeddingScorer::new(Arc::clone(&embedder))),
        embedder,
        llm: Arc::new(ScriptedProvider::new(rules)),
        call_log: Arc::new(CallLog::default()),
    };
    let mut config = Config::default();
    config.retrieval.n_variants = 0;
    config.reflection = reflection;
    Pipeline::new(store, corpus, providers, &config, clock).unwrap()
}

pub const ANSWER: &str = "One meeting may be missed with prior notice to the tutor.";
pub const CLARIFICATION: &str = "Which meeting do you mean?";

/// Both gates pass on the first draft.
pub fn yes_yes_rules() -> Vec<ScriptedRule> {
    vec![
        ScriptedRule::new("<hallucination-check>", "yes"),
        ScriptedRule::new("<answer-check>", "yes"),
        ScriptedRule::new("<question>", ANSWER),
    ]
}

/// The answer check rejects the first `rejections` drafts, then accepts.
pub fn resolves_after(rejections: usize) -> Vec<ScriptedRule> {
    let mut rules = vec![ScriptedRule::new("<hallucination-check>", "yes")];
    rules.extend((0..rejections).map(|_| ScriptedRule::once("<answer-check>", "no")));
    rules.extend([
        ScriptedRule::new("<answer-check>", "yes"),
        ScriptedRule::new("<rewrite-question>", "Is missing a weekly project meeting allowed?"),
        ScriptedRule::new("<clarification-request>", CLARIFICATION),
        ScriptedRule::new("<question>", ANSWER),
    ]);
    rules
}

/// The answer check never passes.
pub fn never_resolves() -> Vec<ScriptedRule> {
    vec![
        ScriptedRule::new("<hallucination-check>", "yes"),
        ScriptedRule::new("<answer-check>", "no"),
        ScriptedRule::new("<rewrite-question>", "Is missing a weekly project meeting allowed?"),
        ScriptedRule::new("<clarification-request>", CLARIFICATION),
        ScriptedRule::new("<question>", ANSWER),
    ]
}
