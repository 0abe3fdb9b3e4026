//! Self-reflection: the state machine that checks a draft for hallucinations
//! and for whether it resolves the question, regenerates or rewrites the
//! question within bounded budgets, and falls back to asking the user for
//! clarification.
//!
//! One question's lifetime:
//!
//! ```text
//! Retrieve -> Generate -> HallucinationCheck --fail, regen budget left--> Generate
//!                              | pass                  | fail, regen budget spent
//!                              v                       v
//!                         AnswerCheck --fail--> (rewrite budget left?) --yes--> Rewrite -> Retrieve
//!                              | pass                  | no
//!                              v                       v
//!                          Answered          AwaitClarification (second time: Failed)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::generation::{facts_block, generate_answer, Clarification, DraftAnswer, GenerationError};
use crate::llm::{judge_verdict, CompletionProvider, CompletionRequest, LlmError};
use crate::retrieval::{retrieve_bundle_with_context, RetrievalBundle, RetrievalDeps, RetrievalError};
use crate::embedding::EmbeddingError;
use crate::text::{normalize_for_compare, reply_lines, xml_escape};
use crate::Clock;

/// Upper limit for either budget.
pub const MAX_BUDGET: u32 = 5;

pub const CLARIFICATION_FALLBACK: &str =
    "Could you rephrase your question or add more detail about your situation?";

pub const APOLOGY: &str = "I'm sorry, I could not find a reliable answer to your question in the \
project regulations. Please contact the project coordinator.";

pub const HALLUCINATION_CHECK_TAG: &str = "<hallucination-check>";
pub const ANSWER_CHECK_TAG: &str = "<answer-check>";
pub const REWRITE_TAG: &str = "<rewrite-question>";
pub const CLARIFICATION_TAG: &str = "<clarification-request>";

const REWRITE_SYSTEM_PROMPT: &str = "You improve student questions so they can be matched against regulation text.";
const CLARIFY_SYSTEM_PROMPT: &str = "You help students ask precise questions about project regulations.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionConfig {
    pub max_rewrites: u32,
    /// Regenerations allowed per generation cycle, after the first draft.
    pub max_regenerations: u32,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        Self {
            max_rewrites: 2,
            max_regenerations: 2,
        }
    }
}

impl ReflectionConfig {
    pub fn validate(&self) -> Result<(), ReflectionError> {
        if self.max_rewrites > MAX_BUDGET || self.max_regenerations > MAX_BUDGET {
            return Err(ReflectionError::InvalidConfig);
        }
        Ok(())
    }

    /// Most provider completions one `run_turn` call can make: per cycle one
    /// variant request and, per draft, one generation plus one grounding
    /// verdict; then one answer verdict per cycle, one rewrite per extra
    /// cycle and a single clarification question.
    pub fn max_provider_calls_per_turn(&self, variant_requests: bool) -> u32 {
        let cycles = self.max_rewrites + 1;
        let drafts = cycles * (1 + self.max_regenerations);
        let variants = if variant_requests { cycles } else { 0 };
        variants + 2 * drafts + cycles + self.max_rewrites + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionState {
    Retrieve,
    Generate,
    HallucinationCheck,
    AnswerCheck,
    Rewrite,
    AwaitClarification,
    Answered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    pub state: ReflectionState,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReflectionError {
    #[error("the index holds no chunks")]
    EmptyStore,
    #[error("input is empty")]
    EmptyInput,
    #[error("budgets must not exceed {MAX_BUDGET}")]
    InvalidConfig,
    #[error("session in state {0:?} does not accept this input")]
    InvalidState(ReflectionState),
    #[error(transparent)]
    Retrieval(RetrievalError),
}

/// Per-question reflection record. The transcript only ever grows until a
/// new question starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectionSession {
    pub session_id: String,
    pub original_question: String,
    pub current_question: String,
    pub rewrites_used: u32,
    pub regenerations_used_this_cycle: u32,
    /// Drafts generated for this question so far.
    pub generations: u32,
    pub clarification_history: Vec<Clarification>,
    pub clarifications_requested: u32,
    pub pending_clarification: Option<String>,
    pub state: ReflectionState,
    pub transcript: Vec<TranscriptEntry>,
}

impl ReflectionSession {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            original_question: String::new(),
            current_question: String::new(),
            rewrites_used: 0,
            regenerations_used_this_cycle: 0,
            generations: 0,
            clarification_history: Vec::new(),
            clarifications_requested: 0,
            pending_clarification: None,
            state: ReflectionState::Retrieve,
            transcript: Vec::new(),
        }
    }

    pub fn awaiting_clarification(&self) -> bool {
        self.state == ReflectionState::AwaitClarification
    }

    fn start_question(&mut self, question: &str) {
        let id = core::mem::take(&mut self.session_id);
        *self = Self::new(id);
        self.original_question = question.into();
        self.current_question = question.into();
    }

    fn record(&mut self, state: ReflectionState, note: impl Into<String>) {
        self.state = state;
        self.transcript.push(TranscriptEntry {
            state,
            note: note.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Answer,
    ClarificationRequest,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Source {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnOutcome {
    pub kind: OutcomeKind,
    pub text: String,
    pub sources: Vec<Source>,
    pub trace: Vec<TranscriptEntry>,
    pub elapsed_ms: u64,
    pub rewrites: u32,
    /// Regenerations performed during this turn, across all cycles.
    pub regenerations: u32,
    pub generation_index: u32,
    /// Set when a provider failure aborted the turn; `text` is then the fixed fallback.
    pub provider_failure: Option<String>,
}

/// Result of one yes/no gate. Unparseable replies count as failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateVerdict {
    pub passed: bool,
    pub unparseable: bool,
    /// Extra lines of a negative reply, e.g. the unsupported claims.
    pub detail: Vec<String>,
}

impl GateVerdict {
    fn note(&self) -> String {
        if self.unparseable {
            "unparseable verdict, treated as no".into()
        } else if self.passed {
            "yes".into()
        } else {
            "no".into()
        }
    }
}

fn gate(prompt: &str, llm: &dyn CompletionProvider) -> Result<GateVerdict, LlmError> {
    match judge_verdict(prompt, llm) {
        Ok(v) => Ok(GateVerdict {
            passed: v.value,
            unparseable: false,
            detail: if v.value { Vec::new() } else { v.detail },
        }),
        Err(LlmError::UnparseableVerdict(_)) => Ok(GateVerdict {
            passed: false,
            unparseable: true,
            detail: Vec::new(),
        }),
        Err(e) => Err(e),
    }
}

pub fn grounding_prompt(draft: &DraftAnswer) -> String {
    format!(
        "{HALLUCINATION_CHECK_TAG}\n<instructions>Decide whether every claim in the answer is \
         supported by the facts. Reply \"yes\" if all claims are supported. Otherwise reply \"no\" \
         and list each unsupported claim on its own line.</instructions>\n{}\n<answer>{}</answer>\n\
         </hallucination-check>",
        facts_block(&draft.bundle),
        xml_escape(&draft.text)
    )
}

pub fn resolution_prompt(question: &str, draft: &DraftAnswer) -> String {
    format!(
        "{ANSWER_CHECK_TAG}\n<instructions>Decide whether the answer resolves the user's \
         question. Reply \"yes\" or \"no\".</instructions>\n<user-question>{}</user-question>\n\
         <answer>{}</answer>\n</answer-check>",
        xml_escape(question),
        xml_escape(&draft.text)
    )
}

/// Hallucination check: is every claim of the draft supported by its facts?
pub fn check_grounded(draft: &DraftAnswer, llm: &dyn CompletionProvider) -> Result<GateVerdict, LlmError> {
    gate(&grounding_prompt(draft), llm)
}

/// Answer check: does the draft address the question?
pub fn check_resolves(
    question: &str,
    draft: &DraftAnswer,
    llm: &dyn CompletionProvider,
) -> Result<GateVerdict, LlmError> {
    gate(&resolution_prompt(question, draft), llm)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub question: String,
    /// False when the rewrite normalizes to the input or the provider failed.
    pub progressed: bool,
    pub failure: Option<String>,
}

pub fn rewrite_question(current: &str, draft: Option<&DraftAnswer>, llm: &dyn CompletionProvider) -> Rewrite {
    let mut prompt = format!(
        "{REWRITE_TAG}\n<instructions>The question below could not be answered well from the \
         regulations. Rewrite it so it matches regulation text better: rephrase it, correct it, \
         or break it into a more specific question. Reply with the rewritten question only.\
         </instructions>\n<current-question>{}</current-question>\n",
        xml_escape(current)
    );
    if let Some(d) = draft {
        prompt.push_str(&format!("<previous-answer>{}</previous-answer>\n", xml_escape(&d.text)));
    }
    prompt.push_str("</rewrite-question>");

    let unchanged = |failure: Option<String>| Rewrite {
        question: current.into(),
        progressed: false,
        failure,
    };
    match llm.complete(&CompletionRequest::new(REWRITE_SYSTEM_PROMPT, prompt)) {
        Ok(reply) => match reply_lines(&reply).into_iter().next() {
            Some(line) if normalize_for_compare(&line) != normalize_for_compare(current) => Rewrite {
                question: line,
                progressed: true,
                failure: None,
            },
            Some(_) => unchanged(None),
            None => unchanged(Some("provider returned an empty rewrite".into())),
        },
        Err(e) => unchanged(Some(format!("{e}"))),
    }
}

/// One clarification question for the user, or the fixed fallback when the
/// provider fails. The second element carries the failure, if any.
pub fn build_clarification(session: &ReflectionSession, llm: &dyn CompletionProvider) -> (String, Option<String>) {
    let mut prompt = format!(
        "{CLARIFICATION_TAG}\n<instructions>The assistant could not answer the user's question \
         with confidence. Ask the user one short question that would gather the missing details. \
         Reply with the question only.</instructions>\n<user-question>{}</user-question>\n",
        xml_escape(&session.original_question)
    );
    for c in &session.clarification_history {
        prompt.push_str(&format!(
            "<exchange><q>{}</q><a>{}</a></exchange>\n",
            xml_escape(&c.question),
            xml_escape(&c.reply)
        ));
    }
    prompt.push_str("</clarification-request>");
    match llm.complete(&CompletionRequest::new(CLARIFY_SYSTEM_PROMPT, prompt)) {
        Ok(reply) => {
            let text = reply.trim();
            if text.is_empty() {
                (CLARIFICATION_FALLBACK.into(), Some("provider returned an empty question".into()))
            } else {
                (text.into(), None)
            }
        }
        Err(e) => (CLARIFICATION_FALLBACK.into(), Some(format!("{e}"))),
    }
}

/// Collaborators for one turn.
#[derive(Clone, Copy)]
pub struct TurnDeps<'a> {
    pub retrieval: RetrievalDeps<'a>,
    /// Provider for generation, judges, rewriting and clarification.
    pub llm: &'a dyn CompletionProvider,
    pub config: &'a ReflectionConfig,
    pub clock: &'a dyn Clock,
}

enum Abort {
    Provider(String),
    Fatal(ReflectionError),
}

impl From<LlmError> for Abort {
    fn from(e: LlmError) -> Self {
        Abort::Provider(format!("{e}"))
    }
}

impl From<RetrievalError> for Abort {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::EmptyStore => Abort::Fatal(ReflectionError::EmptyStore),
            RetrievalError::Embedding(
                e @ (EmbeddingError::ProviderUnreachable(_) | EmbeddingError::ProviderMalformedResponse(_)),
            ) => Abort::Provider(format!("{e}")),
            other => Abort::Fatal(ReflectionError::Retrieval(other)),
        }
    }
}

struct TurnCounters {
    regenerations: u32,
    last_bundle: Option<Arc<RetrievalBundle>>,
}

/// Starts a new question, dropping any clarification still pending.
pub fn ask_question(
    session: &mut ReflectionSession,
    question: &str,
    deps: &TurnDeps<'_>,
) -> Result<TurnOutcome, ReflectionError> {
    if session.awaiting_clarification() {
        session.record(ReflectionState::Failed, "clarification abandoned for a new question");
    }
    run_turn(session, question, deps)
}

/// Feeds a reply to the pending clarification question.
pub fn answer_clarification(
    session: &mut ReflectionSession,
    reply: &str,
    deps: &TurnDeps<'_>,
) -> Result<TurnOutcome, ReflectionError> {
    if !session.awaiting_clarification() {
        return Err(ReflectionError::InvalidState(session.state));
    }
    run_turn(session, reply, deps)
}

/// Advances `session` by one user input: a new question when the session is
/// idle, or the reply to a pending clarification question.
pub fn run_turn(
    session: &mut ReflectionSession,
    user_input: &str,
    deps: &TurnDeps<'_>,
) -> Result<TurnOutcome, ReflectionError> {
    let started = deps.clock.now_ms();
    deps.config.validate()?;
    let input = user_input.trim();
    if input.is_empty() {
        return Err(ReflectionError::EmptyInput);
    }

    match session.state {
        ReflectionState::AwaitClarification => {
            let question = session.pending_clarification.take().unwrap_or_default();
            session.clarification_history.push(Clarification {
                question,
                reply: input.into(),
            });
            session.record(ReflectionState::Retrieve, format!("clarification reply: {input}"));
        }
        ReflectionState::Retrieve | ReflectionState::Answered | ReflectionState::Failed => {
            session.start_question(input);
            session.record(ReflectionState::Retrieve, format!("question: {input}"));
        }
        mid_turn => return Err(ReflectionError::InvalidState(mid_turn)),
    }

    let mut counters = TurnCounters {
        regenerations: 0,
        last_bundle: None,
    };
    let result = drive(session, deps, &mut counters);
    let elapsed_ms = deps.clock.now_ms().saturating_sub(started);

    let (kind, text, provider_failure) = match result {
        Ok(kind) => {
            let text = match kind {
                OutcomeKind::Answer => session
                    .transcript
                    .iter()
                    .rev()
                    .find(|e| e.state == ReflectionState::Answered)
                    .map(|e| e.note.clone())
                    .unwrap_or_default(),
                OutcomeKind::ClarificationRequest => session.pending_clarification.clone().unwrap_or_default(),
                OutcomeKind::Failed => APOLOGY.into(),
            };
            (kind, text, None)
        }
        Err(Abort::Provider(reason)) => {
            // Ask the user to rephrase without spending the clarification allowance.
            session.pending_clarification = Some(CLARIFICATION_FALLBACK.into());
            session.record(
                ReflectionState::AwaitClarification,
                format!("provider failure: {reason}"),
            );
            (
                OutcomeKind::ClarificationRequest,
                String::from(CLARIFICATION_FALLBACK),
                Some(reason),
            )
        }
        Err(Abort::Fatal(e)) => {
            session.record(ReflectionState::Failed, format!("error: {e}"));
            return Err(e);
        }
    };

    let sources = match (kind, &counters.last_bundle) {
        (OutcomeKind::Answer, Some(bundle)) => bundle
            .context_chunks
            .iter()
            .map(|c| Source {
                chunk_id: c.chunk.id.clone(),
                score: c.rerank_score,
            })
            .collect(),
        _ => Vec::new(),
    };

    Ok(TurnOutcome {
        kind,
        text,
        sources,
        trace: session.transcript.clone(),
        elapsed_ms,
        rewrites: session.rewrites_used,
        regenerations: counters.regenerations,
        generation_index: session.generations,
        provider_failure,
    })
}

fn drive(
    session: &mut ReflectionSession,
    deps: &TurnDeps<'_>,
    counters: &mut TurnCounters,
) -> Result<OutcomeKind, Abort> {
    let config = deps.config;
    loop {
        let extra: Vec<String> = session
            .clarification_history
            .iter()
            .map(|c| c.reply.clone())
            .collect();
        let bundle = Arc::new(retrieve_bundle_with_context(
            &session.current_question,
            &extra,
            &deps.retrieval,
        )?);
        session.record(
            ReflectionState::Retrieve,
            format!(
                "retrieved {} chunks for: {}",
                bundle.context_chunks.len(),
                bundle.trace.query
            ),
        );
        counters.last_bundle = Some(Arc::clone(&bundle));
        session.regenerations_used_this_cycle = 0;

        let mut last_draft = None;
        let mut grounded = false;
        let mut unsupported: Vec<String> = Vec::new();
        loop {
            session.generations += 1;
            let draft = match generate_answer(
                &bundle,
                &session.clarification_history,
                &unsupported,
                deps.llm,
                session.generations,
            ) {
                Ok(d) => d,
                Err(GenerationError::EmptyContext) => {
                    session.generations -= 1;
                    session.record(ReflectionState::Generate, "no context retrieved");
                    break;
                }
                Err(GenerationError::Provider(e)) => return Err(e.into()),
                Err(GenerationError::EmptyAnswer) => {
                    return Err(Abort::Provider("provider returned an empty answer".into()))
                }
            };
            session.record(
                ReflectionState::Generate,
                format!("generation {}", draft.generation_index),
            );
            let verdict = check_grounded(&draft, deps.llm)?;
            session.record(ReflectionState::HallucinationCheck, verdict.note());
            last_draft = Some(draft);
            if verdict.passed {
                grounded = true;
                break;
            }
            if session.regenerations_used_this_cycle >= config.max_regenerations {
                break;
            }
            session.regenerations_used_this_cycle += 1;
            counters.regenerations += 1;
            unsupported = verdict.detail;
        }

        if grounded {
            let draft = last_draft.as_ref().expect("grounded implies a draft");
            let verdict = check_resolves(&session.original_question, draft, deps.llm)?;
            session.record(ReflectionState::AnswerCheck, verdict.note());
            if verdict.passed {
                session.record(ReflectionState::Answered, draft.text.clone());
                return Ok(OutcomeKind::Answer);
            }
        }

        if session.rewrites_used < config.max_rewrites {
            let rewrite = rewrite_question(&session.current_question, last_draft.as_ref(), deps.llm);
            session.rewrites_used += 1;
            let note = match (&rewrite.failure, rewrite.progressed) {
                (Some(f), _) => format!("rewrite failed ({f}); keeping question"),
                (None, false) => String::from("rewrite made no progress; keeping question"),
                (None, true) => format!("rewritten: {}", rewrite.question),
            };
            session.current_question = rewrite.question;
            session.record(ReflectionState::Rewrite, note);
            continue;
        }

        if session.clarifications_requested >= 1 {
            session.record(ReflectionState::Failed, "clarification already requested once");
            return Ok(OutcomeKind::Failed);
        }
        let (text, failure) = build_clarification(session, deps.llm);
        session.clarifications_requested += 1;
        session.pending_clarification = Some(text.clone());
        if let Some(f) = failure {
            session.transcript.push(TranscriptEntry {
                state: ReflectionState::AwaitClarification,
                note: format!("clarification fallback used: {f}"),
            });
        }
        session.record(ReflectionState::AwaitClarification, text);
        return Ok(OutcomeKind::ClarificationRequest);
    }
}

/// Outcome implied by the last transcript entry.
pub fn replay_outcome(transcript: &[TranscriptEntry]) -> Option<OutcomeKind> {
    match transcript.last()?.state {
        ReflectionState::Answered => Some(OutcomeKind::Answer),
        ReflectionState::AwaitClarification => Some(OutcomeKind::ClarificationRequest),
        ReflectionState::Failed => Some(OutcomeKind::Failed),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Chunk, Corpus};
    use crate::embedding::HashEmbedder;
    use crate::llm::{ScriptedProvider, ScriptedRule};
    use crate::retrieval::{build_index, EmbeddingScorer, RetrievalConfig};
    use crate::vectorstore::VectorStore;
    use crate::FrozenClock;
    use alloc::vec;

    struct Fixture {
        corpus: Corpus,
        store: VectorStore,
        embedder: HashEmbedder,
        reranker: EmbeddingScorer<HashEmbedder>,
        retrieval: RetrievalConfig,
    }

    fn fixture() -> Fixture {
        let chunk = |id: &str, text: &str| Chunk {
            id: id.into(),
            doc_id: "rules".into(),
            title: String::new(),
            section_path: String::new(),
            text: text.into(),
            tags: vec![],
        };
        let corpus = Corpus::new(
            vec![
                chunk("att", "One meeting may be skipped without notice."),
                chunk("exam", "The resit takes place in July."),
            ],
            vec![],
        );
        let embedder = HashEmbedder::default();
        let store = build_index(&corpus, &embedder).unwrap();
        Fixture {
            corpus,
            store,
            embedder,
            reranker: EmbeddingScorer::new(embedder),
            retrieval: RetrievalConfig {
                n_variants: 0,
                ..RetrievalConfig::default()
            },
        }
    }

    fn run(
        fx: &Fixture,
        llm: &ScriptedProvider,
        config: &ReflectionConfig,
        session: &mut ReflectionSession,
        input: &str,
    ) -> TurnOutcome {
        let deps = TurnDeps {
            retrieval: RetrievalDeps {
                store: &fx.store,
                corpus: &fx.corpus,
                embedder: &fx.embedder,
                llm,
                reranker: &fx.reranker,
                config: &fx.retrieval,
            },
            llm,
            config,
            clock: &FrozenClock(0),
        };
        run_turn(session, input, &deps).unwrap()
    }

    fn script(grounded: &[&str], resolves: &[&str], fallback: &str) -> ScriptedProvider {
        let mut rules = Vec::new();
        rules.extend(grounded.iter().map(|r| ScriptedRule::once(HALLUCINATION_CHECK_TAG, *r)));
        rules.push(ScriptedRule::new(HALLUCINATION_CHECK_TAG, fallback));
        rules.extend(resolves.iter().map(|r| ScriptedRule::once(ANSWER_CHECK_TAG, *r)));
        rules.push(ScriptedRule::new(ANSWER_CHECK_TAG, fallback));
        rules.push(ScriptedRule::new(REWRITE_TAG, "What happens if I miss a meeting?"));
        rules.push(ScriptedRule::new(CLARIFICATION_TAG, "Which meeting do you mean?"));
        rules.push(ScriptedRule::new("<question>", "You may skip one meeting."));
        ScriptedProvider::new(rules)
    }

    fn count(trace: &[TranscriptEntry], state: ReflectionState) -> usize {
        trace.iter().filter(|e| e.state == state).count()
    }

    #[test]
    fn yes_yes_answers_after_one_generation() {
        let fx = fixture();
        let llm = script(&["yes"], &["yes"], "no");
        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm, &ReflectionConfig::default(), &mut s, "Can I skip a meeting?");
        assert_eq!(out.kind, OutcomeKind::Answer);
        assert_eq!(out.text, "You may skip one meeting.");
        assert_eq!(out.generation_index, 1);
        // one generation + two judge calls
        assert_eq!(llm.call_count(), 3);
        assert_eq!(out.sources[0].chunk_id, "att");
        assert_eq!(replay_outcome(&out.trace), Some(OutcomeKind::Answer));
    }

    #[test]
    fn regenerates_until_grounded() {
        let fx = fixture();
        let llm = script(&["no", "no", "yes"], &["yes"], "no");
        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm, &ReflectionConfig::default(), &mut s, "Can I skip a meeting?");
        assert_eq!(out.kind, OutcomeKind::Answer);
        assert_eq!(out.generation_index, 3);
        assert_eq!(s.regenerations_used_this_cycle, 2);
        assert_eq!(out.regenerations, 2);
    }

    #[test]
    fn unresolved_answers_exhaust_rewrites_then_clarify() {
        let fx = fixture();
        let llm = script(&[], &[], "no");
        let llm_yes_grounded = {
            let mut rules = vec![ScriptedRule::new(HALLUCINATION_CHECK_TAG, "yes")];
            rules.push(ScriptedRule::new(ANSWER_CHECK_TAG, "no"));
            rules.push(ScriptedRule::new(REWRITE_TAG, "What happens if I miss a meeting?"));
            rules.push(ScriptedRule::new(CLARIFICATION_TAG, "Which meeting do you mean?"));
            rules.push(ScriptedRule::new("<question>", "You may skip one meeting."));
            ScriptedProvider::new(rules)
        };
        let config = ReflectionConfig::default();

        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm_yes_grounded, &config, &mut s, "Can I skip a meeting?");
        assert_eq!(out.kind, OutcomeKind::ClarificationRequest);
        assert_eq!(out.text, "Which meeting do you mean?");
        assert_eq!(count(&out.trace, ReflectionState::Retrieve), 1 + 3);
        assert_eq!(count(&out.trace, ReflectionState::Generate), 3);
        assert_eq!(out.rewrites, 2);

        // Grounding never passes either: every cycle uses its full regeneration budget.
        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm, &config, &mut s, "Can I skip a meeting?");
        assert_eq!(out.kind, OutcomeKind::ClarificationRequest);
        assert_eq!(count(&out.trace, ReflectionState::Generate), 3 * (1 + 2));
        assert!(s.awaiting_clarification());
    }

    #[test]
    fn second_clarification_fails() {
        let fx = fixture();
        let llm = script(&[], &[], "no");
        let config = ReflectionConfig::default();
        let mut s = ReflectionSession::new("s");
        let first = run(&fx, &llm, &config, &mut s, "Can I skip a meeting?");
        assert_eq!(first.kind, OutcomeKind::ClarificationRequest);
        let second = run(&fx, &llm, &config, &mut s, "The weekly tutor meeting");
        assert_eq!(second.kind, OutcomeKind::Failed);
        assert_eq!(second.text, APOLOGY);
        assert_eq!(s.state, ReflectionState::Failed);
        assert_eq!(s.clarification_history.len(), 1);
    }

    #[test]
    fn clarification_reply_can_lead_to_answer() {
        let fx = fixture();
        let llm = ScriptedProvider::new(vec![
            ScriptedRule::new(HALLUCINATION_CHECK_TAG, "yes"),
            ScriptedRule::once(ANSWER_CHECK_TAG, "no"),
            ScriptedRule::new(ANSWER_CHECK_TAG, "yes"),
            ScriptedRule::new(CLARIFICATION_TAG, "Which meeting?"),
            ScriptedRule::new("<question>", "You may skip one meeting."),
        ]);
        let config = ReflectionConfig {
            max_rewrites: 0,
            max_regenerations: 0,
        };
        let mut s = ReflectionSession::new("s");
        let first = run(&fx, &llm, &config, &mut s, "Can I skip?");
        assert_eq!(first.kind, OutcomeKind::ClarificationRequest);
        let second = run(&fx, &llm, &config, &mut s, "The weekly tutor meeting");
        assert_eq!(second.kind, OutcomeKind::Answer);
        assert!(second.trace.len() > first.trace.len());
        assert_eq!(&second.trace[..first.trace.len()], &first.trace[..]);
    }

    #[test]
    fn unparseable_verdict_is_a_failure() {
        let fx = fixture();
        let llm = ScriptedProvider::new(vec![
            ScriptedRule::new(HALLUCINATION_CHECK_TAG, "perhaps"),
            ScriptedRule::new(CLARIFICATION_TAG, "Which meeting?"),
            ScriptedRule::new(REWRITE_TAG, "x"),
            ScriptedRule::new("<question>", "answer"),
        ]);
        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm, &ReflectionConfig { max_rewrites: 0, max_regenerations: 0 }, &mut s, "q?");
        assert_eq!(out.kind, OutcomeKind::ClarificationRequest);
        assert!(out
            .trace
            .iter()
            .any(|e| e.state == ReflectionState::HallucinationCheck && e.note.contains("unparseable")));
    }

    #[test]
    fn gate_helpers() {
        let fx = fixture();
        let bundle = Arc::new(
            crate::retrieval::retrieve_bundle(
                "skip meeting",
                &RetrievalDeps {
                    store: &fx.store,
                    corpus: &fx.corpus,
                    embedder: &fx.embedder,
                    llm: &ScriptedProvider::new(vec![]),
                    reranker: &fx.reranker,
                    config: &fx.retrieval,
                },
            )
            .unwrap(),
        );
        let draft = DraftAnswer {
            text: "You may skip one.".into(),
            prompt_used: String::new(),
            bundle,
            generation_index: 1,
        };
        for (reply, passed, unparseable) in [("yes", true, false), ("no", false, false), ("perhaps", false, true)] {
            let llm = ScriptedProvider::new(vec![]).with_default(reply);
            let g = check_grounded(&draft, &llm).unwrap();
            assert_eq!((g.passed, g.unparseable), (passed, unparseable));
            let r = check_resolves("q", &draft, &llm).unwrap();
            assert_eq!((r.passed, r.unparseable), (passed, unparseable));
        }
        let down = ScriptedProvider::new(vec![]);
        assert_eq!(check_grounded(&draft, &down), Err(LlmError::NoRuleMatched));
    }

    #[test]
    fn rewrite_rules() {
        let llm = ScriptedProvider::new(vec![]).with_default("What happens if I miss the final exam?");
        let r = rewrite_question("missed exam", None, &llm);
        assert_eq!(r.question, "What happens if I miss the final exam?");
        assert!(r.progressed);

        let same = ScriptedProvider::new(vec![]).with_default("MISSED  exam");
        let r = rewrite_question("missed exam", None, &same);
        assert_eq!(r.question, "missed exam");
        assert!(!r.progressed);
        assert!(r.failure.is_none());

        let down = ScriptedProvider::new(vec![]);
        let r = rewrite_question("missed exam", None, &down);
        assert_eq!(r.question, "missed exam");
        assert!(r.failure.is_some());
    }

    #[test]
    fn clarification_fallback_is_fixed() {
        let mut s = ReflectionSession::new("s");
        s.start_question("q");
        let (text, failure) = build_clarification(&s, &ScriptedProvider::new(vec![]));
        assert_eq!(text, "Could you rephrase your question or add more detail about your situation?");
        assert!(failure.is_some());
        let (text, failure) = build_clarification(&s, &ScriptedProvider::new(vec![]).with_default("Which course?"));
        assert_eq!(text, "Which course?");
        assert!(failure.is_none());
    }

    #[test]
    fn provider_failure_aborts_with_fallback() {
        let fx = fixture();
        let llm = ScriptedProvider::new(vec![]);
        let mut s = ReflectionSession::new("s");
        let out = run(&fx, &llm, &ReflectionConfig::default(), &mut s, "q?");
        assert_eq!(out.kind, OutcomeKind::ClarificationRequest);
        assert_eq!(out.text, CLARIFICATION_FALLBACK);
        assert!(out.provider_failure.is_some());
        assert_eq!(s.clarifications_requested, 0);
    }

    #[test]
    fn config_bounds() {
        assert!(ReflectionConfig { max_rewrites: 6, max_regenerations: 0 }.validate().is_err());
        assert!(ReflectionConfig { max_rewrites: 5, max_regenerations: 5 }.validate().is_ok());
        // defaults: 3 cycles, 9 drafts -> 3 + 18 + 3 + 2 + 1
        assert_eq!(ReflectionConfig::default().max_provider_calls_per_turn(true), 27);
    }
}
