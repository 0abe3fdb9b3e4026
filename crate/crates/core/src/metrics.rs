//! Evaluation metrics, the dataset runner and latency statistics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::EvalCase;
use crate::embedding::{cosine_similarity, Embedder, EmbeddingError};
use crate::generation::{context_texts, generate_answer, GenerationError};
use crate::llm::{judge_verdict, CompletionProvider, CompletionRequest, LlmError};
use crate::retrieval::{retrieve_bundle, RetrievalDeps, RetrievalError};
use crate::text::{reply_lines, xml_escape};
use crate::Clock;

pub const DEFAULT_ANSWER_RELEVANCY_N: usize = 3;

pub const CONTEXT_RELEVANCE_TAG: &str = "<context-relevance>";
pub const SENTENCE_ATTRIBUTION_TAG: &str = "<sentence-attribution>";
pub const CLAIM_EXTRACTION_TAG: &str = "<claim-extraction>";
pub const CLAIM_SUPPORT_TAG: &str = "<claim-support>";
pub const QUESTION_GENERATION_TAG: &str = "<question-generation>";

const EXTRACTION_SYSTEM_PROMPT: &str = "You break answers into short, self-contained factual claims.";
const QUESTION_SYSTEM_PROMPT: &str = "You write questions that a given answer would answer.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("relevance list is empty")]
    EmptyRanking,
    #[error("relevant id set is empty")]
    EmptyRelevantSet,
    #[error("ground truth has no sentences")]
    NoSentences,
    #[error("judge extracted no claims")]
    NoClaims,
    #[error("provider generated no questions")]
    GenerationFailed,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("latency list is empty")]
    EmptyList,
    #[error(transparent)]
    Provider(#[from] LlmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl MetricError {
    /// Errors that leave a metric undefined rather than failing the case.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            MetricError::NoSentences | MetricError::NoClaims | MetricError::GenerationFailed
        )
    }
}

/// Context precision over a ranked relevance list, K = list length:
/// the sum of precision@k at each relevant rank, divided by the number of
/// relevant items. No relevant items scores 0.
pub fn context_precision_at_k(relevance: &[bool]) -> Result<f64, MetricError> {
    if relevance.is_empty() {
        return Err(MetricError::EmptyRanking);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &relevant) in relevance.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
/// Fragments that are empty after trimming are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(String::from(s));
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(String::from(tail));
    }
    out
}

/// The three judging faculties the metrics need.
pub trait EvalJudge: Send + Sync {
    fn chunk_relevant(&self, question: &str, chunk_text: &str) -> Result<bool, LlmError>;
    fn sentence_attributed(&self, sentence: &str, contexts: &[String]) -> Result<bool, LlmError>;
    fn extract_claims(&self, answer: &str) -> Result<Vec<String>, LlmError>;
    fn claim_supported(&self, claim: &str, contexts: &[String]) -> Result<bool, LlmError>;
}

/// Judge backed by a completion provider. An unparseable verdict counts as "no".
pub struct LlmJudge<'a> {
    llm: &'a dyn CompletionProvider,
}

impl<'a> LlmJudge<'a> {
    pub fn new(llm: &'a dyn CompletionProvider) -> Self {
        Self { llm }
    }

    fn verdict(&self, prompt: &str) -> Result<bool, LlmError> {
        match judge_verdict(prompt, self.llm) {
            Ok(v) => Ok(v.value),
            Err(LlmError::UnparseableVerdict(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

fn contexts_block(contexts: &[String]) -> String {
    let mut s = String::from("<contexts>\n");
    for (i, c) in contexts.iter().enumerate() {
        let _ = writeln!(s, "<context n=\"{}\">{}</context>", i + 1, xml_escape(c));
    }
    s.push_str("</contexts>");
    s
}

impl EvalJudge for LlmJudge<'_> {
    fn chunk_relevant(&self, question: &str, chunk_text: &str) -> Result<bool, LlmError> {
        self.verdict(&format!(
            "{CONTEXT_RELEVANCE_TAG}\n<instructions>Is the document useful for answering the \
             user's question? Reply \"yes\" or \"no\".</instructions>\n\
             <user-question>{}</user-question>\n<document>{}</document>\n</context-relevance>",
            xml_escape(question),
            xml_escape(chunk_text)
        ))
    }

    fn sentence_attributed(&self, sentence: &str, contexts: &[String]) -> Result<bool, LlmError> {
        self.verdict(&format!(
            "{SENTENCE_ATTRIBUTION_TAG}\n<instructions>Can the sentence be attributed to the \
             contexts? Reply \"yes\" or \"no\".</instructions>\n{}\n<sentence>{}</sentence>\n\
             </sentence-attribution>",
            contexts_block(contexts),
            xml_escape(sentence)
        ))
    }

    fn extract_claims(&self, answer: &str) -> Result<Vec<String>, LlmError> {
        let prompt = format!(
            "{CLAIM_EXTRACTION_TAG}\n<instructions>List every factual claim made by the answer, \
             one per line. Reply with nothing if it makes no claims.</instructions>\n\
             <answer>{}</answer>\n</claim-extraction>",
            xml_escape(answer)
        );
        let reply = self
            .llm
            .complete(&CompletionRequest::new(EXTRACTION_SYSTEM_PROMPT, prompt))?;
        Ok(reply_lines(&reply))
    }

    fn claim_supported(&self, claim: &str, contexts: &[String]) -> Result<bool, LlmError> {
        self.verdict(&format!(
            "{CLAIM_SUPPORT_TAG}\n<instructions>Can the claim be inferred from the contexts? \
             Reply \"yes\" or \"no\".</instructions>\n{}\n<claim>{}</claim>\n</claim-support>",
            contexts_block(contexts),
            xml_escape(claim)
        ))
    }
}

/// Fraction of ground-truth sentences the judge attributes to the contexts.
pub fn context_recall(ground_truth: &str, contexts: &[String], judge: &dyn EvalJudge) -> Result<f64, MetricError> {
    let sentences = split_sentences(ground_truth);
    if sentences.is_empty() {
        return Err(MetricError::NoSentences);
    }
    let mut attributed = 0usize;
    for s in &sentences {
        if judge.sentence_attributed(s, contexts)? {
            attributed += 1;
        }
    }
    Ok(attributed as f64 / sentences.len() as f64)
}

/// |retrieved ∩ relevant| / |relevant|, with set semantics on both sides.
pub fn custom_precision<S: AsRef<str>, T: AsRef<str>>(retrieved: &[S], relevant: &[T]) -> Result<f64, MetricError> {
    let relevant: BTreeSet<&str> = relevant.iter().map(AsRef::as_ref).collect();
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevantSet);
    }
    let retrieved: BTreeSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
    Ok(relevant.intersection(&retrieved).count() as f64 / relevant.len() as f64)
}

pub fn question_generation_prompt(answer: &str, n: usize) -> String {
    format!(
        "{QUESTION_GENERATION_TAG}\n<instructions>Write {n} different questions that the answer \
         below would answer, one per line.</instructions>\n<answer>{}</answer>\n\
         </question-generation>",
        xml_escape(answer)
    )
}

/// Mean cosine between the original question and up to `n` questions the
/// provider generates from the answer. Not clamped.
pub fn answer_relevancy(
    original_question: &str,
    answer: &str,
    n: usize,
    llm: &dyn CompletionProvider,
    embedder: &dyn Embedder,
) -> Result<f64, MetricError> {
    if answer.trim().is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let reply = llm.complete(&CompletionRequest::new(
        QUESTION_SYSTEM_PROMPT,
        question_generation_prompt(answer, n),
    ))?;
    let generated: Vec<String> = reply_lines(&reply).into_iter().take(n).collect();
    if generated.is_empty() {
        return Err(MetricError::GenerationFailed);
    }
    let mut texts: Vec<&str> = Vec::with_capacity(generated.len() + 1);
    texts.push(original_question);
    texts.extend(generated.iter().map(String::as_str));
    let vectors = embedder.embed_batch(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::ProviderMalformedResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        ))
        .into());
    }
    let mut sum = 0.0;
    for v in &vectors[1..] {
        sum += cosine_similarity(v, &vectors[0])?;
    }
    Ok(sum / generated.len() as f64)
}

/// Fraction of the answer's extracted claims that the contexts support.
pub fn faithfulness(answer: &str, contexts: &[String], judge: &dyn EvalJudge) -> Result<f64, MetricError> {
    if answer.trim().is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let claims = judge.extract_claims(answer)?;
    if claims.is_empty() {
        return Err(MetricError::NoClaims);
    }
    let mut supported = 0usize;
    for c in &claims {
        if judge.claim_supported(c, contexts)? {
            supported += 1;
        }
    }
    Ok(supported as f64 / claims.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean: f64,
    /// Sample standard deviation; undefined for a single value.
    pub std: Option<f64>,
}

pub fn timing_stats(latencies: &[f64]) -> Result<TimingStats, MetricError> {
    if latencies.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let n = latencies.len() as f64;
    let mean = latencies.iter().sum::<f64>() / n;
    let std = (latencies.len() > 1).then(|| {
        let ss: f64 = latencies.iter().map(|x| (x - mean) * (x - mean)).sum();
        libm::sqrt(ss / (n - 1.0))
    });
    Ok(TimingStats { mean, std })
}

/// A metric value, or the reason it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined { undefined: String },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceSource {
    /// Membership in the case's `relevant_chunk_ids`.
    #[default]
    Labels,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub answer_relevancy_n: usize,
    pub relevance: RelevanceSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            answer_relevancy_n: DEFAULT_ANSWER_RELEVANCY_N,
            relevance: RelevanceSource::Labels,
        }
    }
}

#[derive(Clone, Copy)]
pub struct EvalDeps<'a> {
    pub retrieval: RetrievalDeps<'a>,
    /// Generator, also used to regenerate questions for answer relevancy.
    pub llm: &'a dyn CompletionProvider,
    pub judge: &'a dyn EvalJudge,
    pub clock: &'a dyn Clock,
    pub options: &'a EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: EvalCase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub retrieved_ids: Vec<String>,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_precision: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_recall: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_relevancy: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom_precision: Option<MetricValue>,
    pub latency_ms: u64,
}

impl CaseResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    fn failure(case: &EvalCase, latency_ms: u64, error: String) -> Self {
        Self {
            case: case.clone(),
            error: Some(error),
            retrieved_ids: Vec::new(),
            answer: String::new(),
            context_precision: None,
            context_recall: None,
            answer_relevancy: None,
            faithfulness: None,
            custom_precision: None,
            latency_ms,
        }
    }
}

/// How many cases left each metric undefined.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UndefinedCounts {
    pub context_precision: usize,
    pub context_recall: usize,
    pub answer_relevancy: usize,
    pub faithfulness: usize,
    pub custom_precision: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub context_precision: Option<f64>,
    pub context_recall: Option<f64>,
    pub answer_relevancy: Option<f64>,
    pub faithfulness: Option<f64>,
    pub custom_precision: Option<f64>,
    pub latency_mean_ms: Option<f64>,
    pub latency_std_ms: Option<f64>,
    pub cases_total: usize,
    pub cases_failed: usize,
    pub undefined: UndefinedCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub cases: Vec<CaseResult>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    /// Pretty JSON with a trailing newline; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn metric(r: Result<f64, MetricError>) -> Result<MetricValue, MetricError> {
    match r {
        Ok(v) => Ok(MetricValue::Defined(v)),
        Err(e) if e.is_degenerate() => Ok(MetricValue::Undefined {
            undefined: format!("{e}"),
        }),
        Err(e) => Err(e),
    }
}

fn case_error(e: impl core::fmt::Display) -> String {
    format!("{e}")
}

/// Retrieval plus a single generation, then all five metrics. Reflection is
/// not involved. Latency covers retrieval and generation only.
pub fn evaluate_case(case: &EvalCase, deps: &EvalDeps<'_>) -> CaseResult {
    let started = deps.clock.now_ms();
    let pipeline = retrieve_bundle(&case.question, &deps.retrieval)
        .map_err(|e: RetrievalError| case_error(e))
        .and_then(|bundle| {
            let bundle = Arc::new(bundle);
            generate_answer(&bundle, &[], &[], deps.llm, 1).map_err(|e: GenerationError| case_error(e))
        });
    let latency_ms = deps.clock.now_ms().saturating_sub(started);
    let draft = match pipeline {
        Ok(d) => d,
        Err(e) => return CaseResult::failure(case, latency_ms, e),
    };

    let retrieved_ids: Vec<String> = draft.bundle.chunk_ids().map(String::from).collect();
    let contexts = context_texts(&draft.bundle);

    let scored = (|| -> Result<[MetricValue; 5], MetricError> {
        let flags: Vec<bool> = match deps.options.relevance {
            RelevanceSource::Labels => retrieved_ids
                .iter()
                .map(|id| case.relevant_chunk_ids.iter().any(|r| r == id))
                .collect(),
            RelevanceSource::Judge => {
                let mut flags = Vec::with_capacity(contexts.len());
                for c in &contexts {
                    flags.push(deps.judge.chunk_relevant(&case.question, c)?);
                }
                flags
            }
        };
        Ok([
            metric(context_precision_at_k(&flags))?,
            metric(context_recall(&case.ground_truth, &contexts, deps.judge))?,
            metric(answer_relevancy(
                &case.question,
                &draft.text,
                deps.options.answer_relevancy_n,
                deps.llm,
                deps.retrieval.embedder,
            ))?,
            metric(faithfulness(&draft.text, &contexts, deps.judge))?,
            metric(custom_precision(&retrieved_ids, &case.relevant_chunk_ids))?,
        ])
    })();

    match scored {
        Ok([cp, cr, ar, f, custom]) => CaseResult {
            case: case.clone(),
            error: None,
            retrieved_ids,
            answer: draft.text,
            context_precision: Some(cp),
            context_recall: Some(cr),
            answer_relevancy: Some(ar),
            faithfulness: Some(f),
            custom_precision: Some(custom),
            latency_ms,
        },
        Err(e) => {
            let mut failed = CaseResult::failure(case, latency_ms, case_error(e));
            failed.retrieved_ids = retrieved_ids;
            failed.answer = draft.text;
            failed
        }
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(cases: &[CaseResult]) -> Aggregates {
    let ok: Vec<&CaseResult> = cases.iter().filter(|c| !c.failed()).collect();
    let pick = |f: fn(&CaseResult) -> &Option<MetricValue>| {
        let mean = mean_of(ok.iter().filter_map(|c| f(c).as_ref().and_then(MetricValue::value)));
        let undefined = ok
            .iter()
            .filter(|c| matches!(f(c), Some(MetricValue::Undefined { .. })))
            .count();
        (mean, undefined)
    };
    let (context_precision, u_cp) = pick(|c| &c.context_precision);
    let (context_recall, u_cr) = pick(|c| &c.context_recall);
    let (answer_relevancy, u_ar) = pick(|c| &c.answer_relevancy);
    let (faithfulness, u_f) = pick(|c| &c.faithfulness);
    let (custom_precision, u_custom) = pick(|c| &c.custom_precision);
    let latencies: Vec<f64> = ok.iter().map(|c| c.latency_ms as f64).collect();
    let timing = timing_stats(&latencies).ok();
    Aggregates {
        context_precision,
        context_recall,
        answer_relevancy,
        faithfulness,
        custom_precision,
        latency_mean_ms: timing.map(|t| t.mean),
        latency_std_ms: timing.and_then(|t| t.std),
        cases_total: cases.len(),
        cases_failed: cases.len() - ok.len(),
        undefined: UndefinedCounts {
            context_precision: u_cp,
            context_recall: u_cr,
            answer_relevancy: u_ar,
            faithfulness: u_f,
            custom_precision: u_custom,
        },
    }
}

/// Evaluates every case in dataset order. A failing case is recorded and
/// left out of the means instead of aborting the run.
pub fn run_eval(dataset: &[EvalCase], deps: &EvalDeps<'_>, config_echo: serde_json::Value) -> MetricsReport {
    let cases: Vec<CaseResult> = dataset.iter().map(|c| evaluate_case(c, deps)).collect();
    let aggregates = aggregate(&cases);
    MetricsReport {
        config: config_echo,
        cases,
        aggregates,
    }
}
