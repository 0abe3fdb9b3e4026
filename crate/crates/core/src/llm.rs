//! Generative provider contract, the scripted test double, and the strict
//! yes/no judge helper.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

/// Temperature used for answer generation and every judge call.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
/// Query-variant generation runs hotter to diversify rephrasings.
pub const VARIANT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("malformed provider response: {0}")]
    ProviderMalformedResponse(String),
    #[error("no scripted rule matched and no default response is configured")]
    NoRuleMatched,
    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user prompt is empty"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest("temperature must lie in [0, 2]"));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive"));
        }
        Ok(())
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(req)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for alloc::sync::Arc<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(req)
    }
}

/// One scripted response. `pattern` is matched as a substring of the user prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub response: String,
    #[serde(default)]
    pub consumed_once: bool,
}

impl ScriptedRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
            consumed_once: false,
        }
    }

    pub fn once(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            consumed_once: true,
            ..Self::new(pattern, response)
        }
    }
}

/// JSON form of a script: `{"rules": [{"match", "response", "consumed_once"}], "default": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
    #[serde(default)]
    pub default: Option<String>,
}

/// Deterministic provider answering from an ordered rule list. Rules are
/// checked in declaration order and the first live match wins; a
/// `consumed_once` rule goes dead after its first use. No IO is performed.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    rules: Vec<ScriptedRule>,
    consumed: Vec<AtomicBool>,
    default_response: Option<String>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        let consumed = rules.iter().map(|_| AtomicBool::new(false)).collect();
        Self {
            rules,
            consumed,
            default_response: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn from_script(script: Script) -> Self {
        let provider = Self::new(script.rules);
        match script.default {
            Some(d) => provider.with_default(d),
            None => provider,
        }
    }

    pub fn from_json(source: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::from_script(serde_json::from_str(source)?))
    }

    /// Number of `complete` calls served so far, including failed ones.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        for (rule, used) in self.rules.iter().zip(&self.consumed) {
            if !req.user.contains(rule.pattern.as_str()) {
                continue;
            }
            if rule.consumed_once
                && used
                    .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                    .is_err()
            {
                continue;
            }
            return Ok(rule.response.clone());
        }
        self.default_response.clone().ok_or(LlmError::NoRuleMatched)
    }
}

/// A parsed yes/no reply. `detail` holds any lines after the first one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub value: bool,
    pub detail: Vec<String>,
}

pub const JUDGE_SYSTEM_PROMPT: &str =
    "You are a strict evaluator. Reply with exactly \"yes\" or \"no\" on the first line.";

/// Strict prefix parse: the trimmed, lowercased reply must start with `yes` or `no`.
pub fn parse_verdict(reply: &str) -> Result<Verdict, LlmError> {
    let normalized = reply.trim().to_lowercase();
    let value = if normalized.starts_with("yes") {
        true
    } else if normalized.starts_with("no") {
        false
    } else {
        return Err(LlmError::UnparseableVerdict(reply.into()));
    };
    let detail = crate::text::reply_lines(reply).into_iter().skip(1).collect();
    Ok(Verdict { value, detail })
}

/// Asks the provider a yes/no question and parses the reply with [`parse_verdict`].
pub fn judge_verdict(prompt: &str, llm: &dyn CompletionProvider) -> Result<Verdict, LlmError> {
    let reply = llm.complete(&CompletionRequest::new(JUDGE_SYSTEM_PROMPT, prompt))?;
    parse_verdict(&reply)
}

pub fn judge_binary(prompt: &str, llm: &dyn CompletionProvider) -> Result<bool, LlmError> {
    judge_verdict(prompt, llm).map(|v| v.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ask(p: &ScriptedProvider, user: &str) -> Result<String, LlmError> {
        p.complete(&CompletionRequest::new("sys", user))
    }

    #[test]
    fn first_matching_rule_wins() {
        let p = ScriptedProvider::new(vec![
            ScriptedRule::new("grounded", "yes"),
            ScriptedRule::new("ground", "no"),
        ]);
        assert_eq!(ask(&p, "is this grounded?").unwrap(), "yes");
        assert_eq!(ask(&p, "ground truth").unwrap(), "no");
        assert_eq!(p.call_count(), 2);
    }

    #[test]
    fn default_and_no_match() {
        let p = ScriptedProvider::new(vec![]).with_default("UNKNOWN");
        assert_eq!(ask(&p, "anything").unwrap(), "UNKNOWN");
        let p = ScriptedProvider::new(vec![ScriptedRule::new("x", "y")]);
        assert_eq!(ask(&p, "nothing"), Err(LlmError::NoRuleMatched));
    }

    #[test]
    fn consumed_rules_fire_once_in_order() {
        let p = ScriptedProvider::new(vec![
            ScriptedRule::once("check", "no"),
            ScriptedRule::once("check", "no"),
            ScriptedRule::new("check", "yes"),
        ]);
        let replies: Vec<_> = (0..4).map(|_| ask(&p, "check").unwrap()).collect();
        assert_eq!(replies, ["no", "no", "yes", "yes"]);
    }

    #[test]
    fn script_json() {
        let p = ScriptedProvider::from_json(
            r#"{"rules":[{"match":"a","response":"b","consumed_once":true}],"default":"d"}"#,
        )
        .unwrap();
        assert_eq!(ask(&p, "a").unwrap(), "b");
        assert_eq!(ask(&p, "a").unwrap(), "d");
    }

    #[test]
    fn verdict_parsing() {
        let judge = |reply: &str| {
            let p = ScriptedProvider::new(vec![]).with_default(reply);
            judge_binary("q", &p)
        };
        assert_eq!(judge("Yes."), Ok(true));
        assert_eq!(judge("  YES"), Ok(true));
        assert_eq!(judge("no, because the facts say otherwise"), Ok(false));
        assert!(matches!(judge("maybe"), Err(LlmError::UnparseableVerdict(_))));
        assert!(matches!(judge(""), Err(LlmError::UnparseableVerdict(_))));
    }

    #[test]
    fn verdict_detail_lines() {
        let v = parse_verdict("No\n- claim one\n- claim two").unwrap();
        assert!(!v.value);
        assert_eq!(v.detail, ["claim one", "claim two"]);
    }

    #[test]
    fn request_validation() {
        assert!(CompletionRequest::new("s", " ").validate().is_err());
        assert!(CompletionRequest::new("s", "u").with_temperature(2.5).validate().is_err());
        assert!(CompletionRequest::new("s", "u").validate().is_ok());
        assert_eq!(CompletionRequest::new("s", "u").temperature, 0.2);
    }
}
