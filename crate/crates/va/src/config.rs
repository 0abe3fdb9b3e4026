//! JSON configuration.
//!
//! Precedence, highest first: command-line flags, the `--config` file,
//! `VA_*` environment variables, built-in defaults. Relative paths in the
//! config file resolve against the file's directory; relative paths from
//! flags or the environment resolve against the working directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use va_core::metrics::EvalOptions;
use va_core::reflection::ReflectionConfig;
use va_core::RetrievalConfig;

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_CORS_ORIGIN: &str = "http://localhost:5173";
pub const API_KEY_ENV: &str = "VA_API_KEY";

/// Keys whose values are file-system paths.
const PATH_KEYS: &[&[&str]] = &[
    &["index_path"],
    &["corpus_dir"],
    &["qa_path"],
    &["feedback_log"],
    &["question_log"],
    &["ui_dir"],
    &["llm", "script_path"],
];

/// Environment variable to config key.
const ENV_KEYS: &[(&str, &[&str])] = &[
    ("VA_INDEX_PATH", &["index_path"]),
    ("VA_CORPUS_DIR", &["corpus_dir"]),
    ("VA_QA_PATH", &["qa_path"]),
    ("VA_HOST", &["host"]),
    ("VA_PORT", &["port"]),
    ("VA_FEEDBACK_LOG", &["feedback_log"]),
    ("VA_QUESTION_LOG", &["question_log"]),
    ("VA_UI_DIR", &["ui_dir"]),
    ("VA_EMBEDDER_KIND", &["embedder", "kind"]),
    ("VA_EMBEDDER_ENDPOINT", &["embedder", "endpoint"]),
    ("VA_EMBEDDER_MODEL", &["embedder", "model"]),
    ("VA_EMBEDDER_DIMENSION", &["embedder", "dimension"]),
    ("VA_LLM_KIND", &["llm", "kind"]),
    ("VA_LLM_ENDPOINT", &["llm", "endpoint"]),
    ("VA_LLM_MODEL", &["llm", "model"]),
    ("VA_LLM_SCRIPT_PATH", &["llm", "script_path"]),
    ("VA_RERANKER_KIND", &["reranker", "kind"]),
    ("VA_RERANKER_ENDPOINT", &["reranker", "endpoint"]),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {origin}: {source}")]
    Parse {
        origin: String,
        source: serde_json::Error,
    },
    #[error("{0} is required but not configured")]
    Missing(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Hash dimension, or the expected remote dimension when set for a remote embedder.
    pub dimension: Option<usize>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dimension: None,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub kind: LlmKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Rules file for the scripted provider. Without one every call fails.
    pub script_path: Option<PathBuf>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    /// Cosine under the configured embedder.
    #[default]
    Embedding,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankerConfig {
    pub kind: RerankerKind,
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    System,
    /// Every reading is 0, so latencies come out as 0 ms.
    Frozen,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub options: EvalOptions,
    pub clock: ClockKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub index_path: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub qa_path: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub reranker: RerankerConfig,
    pub retrieval: RetrievalConfig,
    pub reflection: ReflectionConfig,
    pub eval: EvalConfig,
    pub host: String,
    pub port: u16,
    pub feedback_log: Option<PathBuf>,
    pub question_log: Option<PathBuf>,
    /// Directory with the built chat UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub cors_origins: Vec<String>,
    /// Idle sessions are dropped after this many seconds.
    pub session_idle_secs: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            index_path: None,
            corpus_dir: None,
            qa_path: None,
            embedder: EmbedderConfig::default(),
            llm: LlmConfig::default(),
            reranker: RerankerConfig::default(),
            retrieval: RetrievalConfig::default(),
            reflection: ReflectionConfig::default(),
            eval: EvalConfig::default(),
            host: DEFAULT_HOST.to_owned(),
            port: DEFAULT_PORT,
            feedback_log: None,
            question_log: None,
            ui_dir: None,
            cors_origins: vec![DEFAULT_CORS_ORIGIN.to_owned()],
            session_idle_secs: 30 * 60,
        }
    }
}

impl Config {
    /// Environment layer under an optional config file.
    pub fn load(file: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(file, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut merged = env_layer(env);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_owned(),
                source,
            })?;
            let mut value: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                origin: path.display().to_string(),
                source,
            })?;
            let base = path.parent().unwrap_or(Path::new(""));
            resolve_paths(&mut value, base);
            merge(&mut merged, value);
        }
        let config: Config = serde_json::from_value(merged).map_err(|source| ConfigError::Parse {
            origin: file.map_or_else(|| "from environment".into(), |p| p.display().to_string()),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.reflection
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.options.answer_relevancy_n == 0 {
            return Err(ConfigError::Invalid("eval.answer_relevancy_n must be positive".into()));
        }
        if self.retrieval.max_context == 0 || self.retrieval.per_query_k == 0 {
            return Err(ConfigError::Invalid(
                "retrieval.max_context and retrieval.per_query_k must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.retrieval.lambda) {
            return Err(ConfigError::Invalid("retrieval.lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn require_index(&self) -> Result<&Path, ConfigError> {
        self.index_path.as_deref().ok_or(ConfigError::Missing("index path (--index)"))
    }

    pub fn require_corpus(&self) -> Result<&Path, ConfigError> {
        self.corpus_dir.as_deref().ok_or(ConfigError::Missing("corpus directory (--corpus)"))
    }

    pub fn require_qa(&self) -> Result<&Path, ConfigError> {
        self.qa_path.as_deref().ok_or(ConfigError::Missing("Q&A dataset (--qa)"))
    }

    /// Settings that shape results, without paths or endpoints, for the eval report.
    pub fn echo(&self) -> Value {
        json!({
            "embedder": {
                "kind": self.embedder.kind,
                "dimension": self.embedder.dimension,
                "model": self.embedder.model,
            },
            "llm": { "kind": self.llm.kind, "model": self.llm.model },
            "reranker": { "kind": self.reranker.kind },
            "retrieval": self.retrieval,
            "eval": self.eval.options,
        })
    }
}

fn env_layer(env: impl Fn(&str) -> Option<String>) -> Value {
    let mut root = Value::Object(Map::new());
    for (var, key) in ENV_KEYS {
        if let Some(raw) = env(var) {
            let numeric = matches!(*var, "VA_PORT" | "VA_EMBEDDER_DIMENSION");
            let value = match raw.trim().parse::<u64>() {
                Ok(n) if numeric => Value::from(n),
                _ => Value::String(raw),
            };
            set_path(&mut root, key, value);
        }
    }
    root
}

fn set_path(root: &mut Value, key: &[&str], value: Value) {
    let mut node = root;
    for part in &key[..key.len() - 1] {
        node = node
            .as_object_mut()
            .expect("intermediate nodes are objects")
            .entry(*part)
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .expect("intermediate nodes are objects")
        .insert(key[key.len() - 1].to_owned(), value);
}

fn resolve_paths(value: &mut Value, base: &Path) {
    for key in PATH_KEYS {
        let mut node = Some(&mut *value);
        for part in *key {
            node = node.and_then(|n| n.get_mut(*part));
        }
        if let Some(Value::String(s)) = node {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

/// Deep merge; `top` wins on conflicts.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults() {
        let c = Config::load_with_env(None, env(&[])).unwrap();
        assert_eq!(c.port, 8080);
        assert_eq!(c.retrieval, RetrievalConfig::default());
        assert_eq!(c.embedder.kind, EmbedderKind::Hash);
    }

    #[test]
    fn file_overrides_env_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("va.json");
        std::fs::write(
            &path,
            r#"{"index_path": "store.json", "llm": {"model": "m1"}, "retrieval": {"n_variants": 0}}"#,
        )
        .unwrap();
        let c = Config::load_with_env(
            Some(&path),
            env(&[("VA_INDEX_PATH", "/elsewhere.json"), ("VA_LLM_MODEL", "m0"), ("VA_PORT", "9000")]),
        )
        .unwrap();
        assert_eq!(c.index_path.unwrap(), dir.path().join("store.json"));
        assert_eq!(c.llm.model.as_deref(), Some("m1"));
        assert_eq!(c.port, 9000);
        assert_eq!(c.retrieval.n_variants, 0);
        assert_eq!(c.retrieval.per_query_k, 8);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_budgets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("va.json");
        std::fs::write(&path, r#"{"prot": 1}"#).unwrap();
        assert!(matches!(Config::load_with_env(Some(&path), env(&[])), Err(ConfigError::Parse { .. })));
        std::fs::write(&path, r#"{"reflection": {"max_rewrites": 9}}"#).unwrap();
        assert!(matches!(Config::load_with_env(Some(&path), env(&[])), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn echo_has_no_paths() {
        let mut c = Config {
            index_path: Some("/secret/store.json".into()),
            ..Config::default()
        };
        c.llm.endpoint = Some("http://host".into());
        let echo = c.echo().to_string();
        assert!(!echo.contains("secret"));
        assert!(!echo.contains("host"));
    }
}
