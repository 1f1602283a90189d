//! Chat and embedding client with record/replay transcripts.
//!
//! All model traffic goes through [`Gateway`]. In `record` mode every new
//! request is forwarded to the backend and the response appended to the
//! transcript; a request whose digest is already recorded is answered from
//! the transcript. In `replay` mode the transcript is the only source and a
//! missing digest is a hard error.

mod digest;
mod http;
mod mock;
mod transcript;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use digest::{chat_digest, digest_json, embed_digest};
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{hash_embed, MockBackend, MockRule, MockScript, DEFAULT_MOCK_DIMENSION};
pub use transcript::{EntryKind, GatewayMode, Transcript, TranscriptLine};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("replay miss: no transcript entry for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("embedding text is empty")]
    EmptyText,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub model_tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role == Role::Assistant => Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            )),
            _ if !(self.temperature >= 0.0 && self.temperature.is_finite()) => Err(GatewayError::InvalidRequest(
                format!("temperature {} < 0", self.temperature),
            )),
            _ => Ok(()),
        }
    }

    /// Concatenated message contents, for containment checks.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingRepr", into = "EmbeddingRepr")]
pub struct Embedding {
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRepr {
    vector: Vec<f64>,
    dimension: usize,
}

impl TryFrom<EmbeddingRepr> for Embedding {
    type Error = String;

    fn try_from(repr: EmbeddingRepr) -> Result<Self, String> {
        if repr.vector.len() != repr.dimension {
            return Err(format!(
                "embedding length {} != dimension {}",
                repr.vector.len(),
                repr.dimension
            ));
        }
        Embedding::from_unit(repr.vector).map_err(|e| e.to_string())
    }
}

impl From<Embedding> for EmbeddingRepr {
    fn from(e: Embedding) -> Self {
        let dimension = e.vector.len();
        EmbeddingRepr {
            vector: e.vector,
            dimension,
        }
    }
}

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl Embedding {
    /// L2-normalizes `raw`. Empty, all-zero, or non-finite input is rejected.
    pub fn new(raw: Vec<f64>) -> Result<Self, GatewayError> {
        if raw.is_empty() {
            return Err(GatewayError::Backend("empty embedding vector".into()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::Backend("non-finite embedding component".into()));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::Backend("all-zero embedding vector".into()));
        }
        Ok(Self {
            vector: raw.into_iter().map(|x| x / norm).collect(),
        })
    }

    /// Accepts an already-normalized vector verbatim (bit-exact replay).
    pub fn from_unit(vector: Vec<f64>) -> Result<Self, GatewayError> {
        if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::Backend("invalid embedding vector".into()));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(GatewayError::Backend(format!(
                "embedding norm {norm} is not within {UNIT_NORM_TOLERANCE} of 1"
            )));
        }
        Ok(Self { vector })
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    /// Cosine similarity, which for unit vectors is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// A chat/embedding provider. Implementations must be thread-safe.
pub trait LlmBackend: Send + Sync + std::fmt::Debug {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Bounded exponential backoff for rate-limited calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    /// Fractional jitter; 0.2 draws each delay from ±20% of nominal.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }

    fn jittered_delay(&self, retry: u32) -> Duration {
        let nominal = self.nominal_delay(retry);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let scale = rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter);
        nominal.mul_f64(scale)
    }

    fn run<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut retry = 0;
        loop {
            match call() {
                Err(GatewayError::RateLimited(msg)) if retry < self.max_retries => {
                    let delay = self.jittered_delay(retry);
                    tracing::warn!(retry, ?delay, "rate limited: {msg}");
                    std::thread::sleep(delay);
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

/// Token bucket: `capacity` burst, refilled at `per_second`.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        let capacity = f64::from(capacity.max(1));
        Self {
            capacity,
            per_second,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available and takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("token bucket poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second).min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - *tokens) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

pub const DEFAULT_MODEL_TAG: &str = "default";

pub struct Gateway {
    mode: GatewayMode,
    backend: Option<Arc<dyn LlmBackend>>,
    transcript: Mutex<Transcript>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    model_tag: String,
    temperature: f64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("backend", &self.backend)
            .finish()
    }
}

impl Gateway {
    /// Live gateway with no transcript.
    pub fn live(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            mode: GatewayMode::Live,
            backend: Some(backend),
            transcript: Mutex::new(Transcript::in_memory(GatewayMode::Live)),
            retry: RetryPolicy::default(),
            limiter: None,
            model_tag: DEFAULT_MODEL_TAG.to_string(),
            temperature: 0.0,
        }
    }

    /// Gateway over `transcript`. Record and live modes require a backend;
    /// replay ignores it.
    pub fn with_transcript(transcript: Transcript, backend: Option<Arc<dyn LlmBackend>>) -> Result<Self, GatewayError> {
        let mode = transcript.mode();
        if mode != GatewayMode::Replay && backend.is_none() {
            return Err(GatewayError::Config(format!("{mode:?} mode needs a backend")));
        }
        Ok(Self {
            mode,
            backend,
            transcript: Mutex::new(transcript),
            retry: RetryPolicy::default(),
            limiter: None,
            model_tag: DEFAULT_MODEL_TAG.to_string(),
            temperature: 0.0,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, bucket: TokenBucket) -> Self {
        self.limiter = Some(bucket);
        self
    }

    /// Model tag and temperature stamped on requests built by [`Gateway::request`].
    pub fn with_model(mut self, model_tag: impl Into<String>, temperature: f64) -> Self {
        self.model_tag = model_tag.into();
        self.temperature = temperature;
        self
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            messages,
            temperature: self.temperature,
            model_tag: self.model_tag.clone(),
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn transcript_len(&self) -> usize {
        self.lock().len()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Transcript> {
        self.transcript.lock().expect("transcript lock poisoned")
    }

    fn backend(&self) -> Result<&Arc<dyn LlmBackend>, GatewayError> {
        self.backend
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no backend configured".into()))
    }

    fn call<T>(&self, f: impl Fn(&dyn LlmBackend) -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let backend = self.backend()?;
        self.retry.run(|| {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            f(backend.as_ref())
        })
    }

    fn lookup(&self, digest: &str) -> Option<Value> {
        if self.mode == GatewayMode::Live {
            return None;
        }
        self.lock().get(digest).map(|l| l.response.clone())
    }

    fn store(&self, digest: String, kind: EntryKind, response: Value) -> Result<(), GatewayError> {
        if self.mode != GatewayMode::Record {
            return Ok(());
        }
        self.lock().insert(TranscriptLine { digest, kind, response })
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let digest = chat_digest(req);
        if let Some(v) = self.lookup(&digest) {
            return v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| GatewayError::Transcript(format!("entry {digest} is not a chat response")));
        }
        if self.mode == GatewayMode::Replay {
            return Err(GatewayError::ReplayMiss { digest });
        }
        let text = self.call(|b| b.chat(req))?;
        self.store(digest, EntryKind::Chat, Value::String(text.clone()))?;
        Ok(text)
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let digest = embed_digest(text);
        if let Some(v) = self.lookup(&digest) {
            let vector: Vec<f64> = serde_json::from_value(v)
                .map_err(|e| GatewayError::Transcript(format!("entry {digest} is not an embedding: {e}")))?;
            return Embedding::from_unit(vector);
        }
        if self.mode == GatewayMode::Replay {
            return Err(GatewayError::ReplayMiss { digest });
        }
        let emb = Embedding::new(self.call(|b| b.embed(text))?)?;
        self.store(
            digest,
            EntryKind::Embed,
            serde_json::to_value(emb.as_slice()).expect("f64 slice serializes"),
        )?;
        Ok(emb)
    }
}
