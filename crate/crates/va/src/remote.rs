//! HTTP clients for remote embedding, chat-completion and rerank services.
//!
//! All three speak JSON over POST, send `Authorization: Bearer` when an API
//! key is configured, retry transport failures and 5xx/429 answers a couple
//! of times with doubling backoff, and append every attempt to a shared
//! [`CallLog`].

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use va_core::embedding::EmbeddingError;
use va_core::llm::LlmError;
use va_core::retrieval::{RerankError, RerankScorer};
use va_core::{Chunk, CompletionProvider, CompletionRequest, Embedder, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallRecord {
    /// Wall-clock start, milliseconds since the Unix epoch.
    pub started_at_ms: u64,
    pub latency_ms: u64,
    pub prompt_bytes: usize,
}

/// Append-only record of remote calls.
#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn record(&self, record: CallRecord) {
        self.records.lock().unwrap_or_else(|p| p.into_inner()).push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub backoff: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }
}

#[derive(Debug)]
enum Failure {
    Unreachable(String),
    Malformed(String),
}

#[derive(Debug)]
struct HttpJson {
    client: Client,
    endpoint: Endpoint,
    log: Arc<CallLog>,
}

impl HttpJson {
    fn new(endpoint: Endpoint, log: Arc<CallLog>) -> Result<Self, reqwest::Error> {
        let client = Client::builder()
            .timeout(endpoint.timeout)
            .connect_timeout(Duration::from_secs(5))
            .build()?;
        Ok(Self { client, endpoint, log })
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value, prompt_bytes: usize) -> Result<T, Failure> {
        let url = format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path);
        let payload = serde_json::to_vec(body).expect("request body serializes");
        let mut attempt = 0;
        loop {
            let started_at_ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64);
            let started = Instant::now();
            let result = self.send_once(&url, payload.clone());
            self.log.record(CallRecord {
                started_at_ms,
                latency_ms: started.elapsed().as_millis() as u64,
                prompt_bytes,
            });
            match result {
                Err(Failure::Unreachable(_)) if attempt < self.endpoint.retries => {
                    std::thread::sleep(self.endpoint.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn send_once<T: DeserializeOwned>(&self, url: &str, payload: Vec<u8>) -> Result<T, Failure> {
        let mut req = self
            .client
            .post(url)
            .header(CONTENT_TYPE, "application/json")
            .body(payload);
        if let Some(key) = &self.endpoint.api_key {
            req = req.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| Failure::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Unreachable(format!("{url} answered {status}")));
        }
        let bytes = resp.bytes().map_err(|e| Failure::Unreachable(e.to_string()))?;
        if !status.is_success() {
            let excerpt: String = String::from_utf8_lossy(&bytes).chars().take(200).collect();
            return Err(Failure::Malformed(format!("{url} answered {status}: {excerpt}")));
        }
        serde_json::from_slice(&bytes).map_err(|e| Failure::Malformed(format!("{url}: {e}")))
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Embeddings over `POST {endpoint}/v1/embeddings`, one request per batch.
/// Returned vectors are re-normalized.
#[derive(Debug)]
pub struct RemoteEmbedder {
    http: HttpJson,
    model: Option<String>,
    dimension: Option<usize>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: Endpoint,
        model: Option<String>,
        dimension: Option<usize>,
        log: Arc<CallLog>,
    ) -> Result<Self, reqwest::Error> {
        Ok(Self {
            http: HttpJson::new(endpoint, log)?,
            model,
            dimension,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        let mut body = json!({ "input": texts });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let bytes = texts.iter().map(|t| t.len()).sum();
        let resp: EmbeddingResponse = self.http.post("/v1/embeddings", &body, bytes).map_err(|f| match f {
            Failure::Unreachable(m) => EmbeddingError::ProviderUnreachable(m),
            Failure::Malformed(m) => EmbeddingError::ProviderMalformedResponse(m),
        })?;
        if resp.data.len() != texts.len() {
            return Err(EmbeddingError::ProviderMalformedResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let expected = self.dimension.unwrap_or(resp.data[0].embedding.len());
        resp.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != expected {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected,
                        actual: d.embedding.len(),
                    });
                }
                EmbeddingVector::normalized(d.embedding)
                    .map_err(|e| EmbeddingError::ProviderMalformedResponse(e.to_string()))
            })
            .collect()
    }

    fn dimension(&self) -> Option<usize> {
        self.dimension
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

/// Chat completions over `POST {endpoint}/v1/chat/completions`.
#[derive(Debug)]
pub struct RemoteChat {
    http: HttpJson,
    model: Option<String>,
    max_tokens: Option<u32>,
}

impl RemoteChat {
    pub fn new(
        endpoint: Endpoint,
        model: Option<String>,
        max_tokens: Option<u32>,
        log: Arc<CallLog>,
    ) -> Result<Self, reqwest::Error> {
        Ok(Self {
            http: HttpJson::new(endpoint, log)?,
            model,
            max_tokens,
        })
    }
}

impl CompletionProvider for RemoteChat {
    fn complete(&self, req: &CompletionRequest) -> Result<String, LlmError> {
        req.validate()?;
        let mut body = json!({
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": req.user },
            ],
            "temperature": req.temperature,
            "max_tokens": self.max_tokens.unwrap_or(req.max_tokens),
        });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let bytes = req.system.len() + req.user.len();
        let resp: ChatResponse = self
            .http
            .post("/v1/chat/completions", &body, bytes)
            .map_err(|f| match f {
                Failure::Unreachable(m) => LlmError::ProviderUnreachable(m),
                Failure::Malformed(m) => LlmError::ProviderMalformedResponse(m),
            })?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::ProviderMalformedResponse("no message content in choices".into()))
    }
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

/// Cross-encoder style scoring over `POST {endpoint}/rerank`.
#[derive(Debug)]
pub struct RemoteReranker {
    http: HttpJson,
}

impl RemoteReranker {
    pub fn new(endpoint: Endpoint, log: Arc<CallLog>) -> Result<Self, reqwest::Error> {
        Ok(Self {
            http: HttpJson::new(endpoint, log)?,
        })
    }
}

impl RerankScorer for RemoteReranker {
    fn score(&self, query: &str, candidates: &[&Chunk]) -> Result<Vec<f64>, RerankError> {
        let documents: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
        let bytes = query.len() + documents.iter().map(|d| d.len()).sum::<usize>();
        let body = json!({ "query": query, "documents": documents });
        let resp: RerankResponse = self.http.post("/rerank", &body, bytes).map_err(|f| match f {
            Failure::Unreachable(m) => RerankError::ProviderUnreachable(m),
            Failure::Malformed(m) => RerankError::ProviderMalformedResponse(m),
        })?;
        Ok(resp.scores)
    }
}
