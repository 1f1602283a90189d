//! Deterministic backend for tests and offline runs.
//!
//! Chat responses come from an ordered rule list: the first rule whose
//! regex matches the rendered conversation wins. Unmatched requests consume
//! the fallback list by ordinal, repeating its last element once exhausted.
//! Embeddings are signed feature hashes of lowercased word unigrams and
//! bigrams.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, GatewayError, LlmBackend};

pub const DEFAULT_MOCK_DIMENSION: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Regex searched for in the concatenated message contents.
    pub pattern: String,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Vec<String>,
    #[serde(default)]
    pub embedding_dimension: Option<usize>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn rule(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            pattern: pattern.into(),
            response: response.into(),
        });
        self
    }

    pub fn fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback.push(response.into());
        self
    }
}

#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<(Regex, String)>,
    fallback: Vec<String>,
    dimension: usize,
    unmatched: AtomicUsize,
    chat_calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        let rules = script
            .rules
            .into_iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.response))
                    .map_err(|e| GatewayError::Config(format!("bad mock pattern `{}`: {e}", r.pattern)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dimension = script.embedding_dimension.unwrap_or(DEFAULT_MOCK_DIMENSION);
        if dimension == 0 {
            return Err(GatewayError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            rules,
            fallback: script.fallback,
            dimension,
            unmatched: AtomicUsize::new(0),
            chat_calls: AtomicUsize::new(0),
        })
    }

    /// Embedding-only backend; every chat falls through to an error.
    pub fn embedder(dimension: usize) -> Self {
        Self::new(MockScript {
            embedding_dimension: Some(dimension),
            ..MockScript::default()
        })
        .expect("empty script is valid")
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let text = req
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if let Some((_, response)) = self.rules.iter().find(|(re, _)| re.is_match(&text)) {
            return Ok(response.clone());
        }
        let n = self.unmatched.fetch_add(1, Ordering::SeqCst);
        match self.fallback.len() {
            0 => Err(GatewayError::Backend("no mock rule matched the request".into())),
            len => Ok(self.fallback[n.min(len - 1)].clone()),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(hash_embed(text, self.dimension))
    }
}

/// Signed feature hashing over word unigrams and bigrams. Text without any
/// alphanumeric token hashes as a single whole-text feature.
pub fn hash_embed(text: &str, dimension: usize) -> Vec<f64> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut v = vec![0.0; dimension];
    let mut add = |feature: &str| {
        let h = Sha256::digest(feature.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&h[..8]);
        let x = u64::from_le_bytes(bytes);
        let idx = (x % dimension as u64) as usize;
        let sign = if (x >> 63) == 1 { -1.0 } else { 1.0 };
        v[idx] += sign;
    };
    if words.is_empty() {
        add(text);
    }
    for w in &words {
        add(w);
    }
    for pair in words.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    if v.iter().all(|x| *x == 0.0) {
        // Opposite-signed collisions cancelled out; fall back to the whole text.
        let h = Sha256::digest(text.as_bytes());
        v[(h[0] as usize) % dimension] = 1.0;
    }
    v
}
