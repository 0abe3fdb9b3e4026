//! Structured XML prompt assembly and answer generation.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::llm::{CompletionProvider, CompletionRequest, LlmError, DEFAULT_TEMPERATURE};
use crate::retrieval::RetrievalBundle;
use crate::text::xml_escape;

/// Reply the model is told to give when the facts do not cover the question.
pub const NO_INFORMATION_REPLY: &str = "I don't have that information";

const GENERATION_SYSTEM_PROMPT: &str =
    "You are a virtual assistant answering student questions about project regulations.";

const INSTRUCTIONS: &str = "Answer the question using only the facts below. Do not add \
information that the facts do not state. If the facts do not contain the answer, reply \
exactly: I don't have that information. The examples show the expected tone and level of \
detail; they are not facts.";

/// One clarification exchange: the question the assistant asked and the user's reply.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Clarification {
    pub question: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("no context chunks to ground the answer in")]
    EmptyContext,
    #[error("provider returned an empty answer")]
    EmptyAnswer,
    #[error(transparent)]
    Provider(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftAnswer {
    pub text: String,
    pub prompt_used: String,
    pub bundle: Arc<RetrievalBundle>,
    /// 1 for the first attempt; grows with every regeneration.
    pub generation_index: u32,
}

/// Builds the generation prompt:
/// `<instructions>`, `<facts>` (one `<document id>` per context chunk),
/// `<examples>` (one `<qa>` per few-shot pair), optional `<clarifications>`,
/// `<question>`, and an optional trailing `<warning>` listing claims a
/// previous draft could not support.
pub fn build_prompt(
    bundle: &RetrievalBundle,
    clarifications: &[Clarification],
    unsupported_claims: &[String],
) -> Result<String, GenerationError> {
    if bundle.context_chunks.is_empty() {
        return Err(GenerationError::EmptyContext);
    }
    let mut p = String::new();
    let _ = writeln!(p, "<instructions>{INSTRUCTIONS}</instructions>");

    p.push_str("<facts>\n");
    for ctx in &bundle.context_chunks {
        let _ = writeln!(
            p,
            "<document id=\"{}\">{}</document>",
            xml_escape(&ctx.chunk.id),
            xml_escape(&ctx.chunk.text)
        );
    }
    p.push_str("</facts>\n");

    p.push_str("<examples>\n");
    for ex in &bundle.fewshot_examples {
        let _ = writeln!(
            p,
            "<qa><q>{}</q><a>{}</a></qa>",
            xml_escape(&ex.pair.question),
            xml_escape(&ex.pair.answer)
        );
    }
    p.push_str("</examples>\n");

    if !clarifications.is_empty() {
        p.push_str("<clarifications>\n");
        for c in clarifications {
            let _ = writeln!(
                p,
                "<exchange><q>{}</q><a>{}</a></exchange>",
                xml_escape(&c.question),
                xml_escape(&c.reply)
            );
        }
        p.push_str("</clarifications>\n");
    }

    let _ = write!(p, "<question>{}</question>", xml_escape(&bundle.question));

    if !unsupported_claims.is_empty() {
        p.push_str("\n<warning>A previous answer made claims the facts do not support. Leave them out:");
        for claim in unsupported_claims {
            let _ = write!(p, "<claim>{}</claim>", xml_escape(claim));
        }
        p.push_str("</warning>");
    }
    Ok(p)
}

pub fn generate_answer(
    bundle: &Arc<RetrievalBundle>,
    clarifications: &[Clarification],
    unsupported_claims: &[String],
    llm: &dyn CompletionProvider,
    generation_index: u32,
) -> Result<DraftAnswer, GenerationError> {
    let prompt = build_prompt(bundle, clarifications, unsupported_claims)?;
    let req = CompletionRequest::new(GENERATION_SYSTEM_PROMPT, prompt.clone())
        .with_temperature(DEFAULT_TEMPERATURE);
    let text = llm.complete(&req)?;
    let text = String::from(text.trim());
    if text.is_empty() {
        return Err(GenerationError::EmptyAnswer);
    }
    Ok(DraftAnswer {
        text,
        prompt_used: prompt,
        bundle: Arc::clone(bundle),
        generation_index,
    })
}

/// `<facts>` block used by judges, in the same form the generator saw.
pub fn facts_block(bundle: &RetrievalBundle) -> String {
    let mut p = String::from("<facts>\n");
    for ctx in &bundle.context_chunks {
        let _ = writeln!(
            p,
            "<document id=\"{}\">{}</document>",
            xml_escape(&ctx.chunk.id),
            xml_escape(&ctx.chunk.text)
        );
    }
    p.push_str("</facts>");
    p
}

pub(crate) fn context_texts(bundle: &RetrievalBundle) -> Vec<String> {
    bundle.context_chunks.iter().map(|c| c.chunk.text.clone()).collect()
}
