//! Text embedders for LLM-written cluster descriptions.

use std::time::Duration;

use serde_json::{json, Value};

use super::SemanticError;

pub const DEFAULT_EMBED_DIM: usize = 384;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, SemanticError>;
}

pub fn embed_text(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f64>, SemanticError> {
    embedder.embed(text)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], offset: u64) -> u64 {
    bytes
        .iter()
        .fold(offset, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Bag-of-tokens feature-hashing embedder.
///
/// Text is lowercased and split on non-alphanumeric characters; each token
/// adds ±1 to one of `dim` buckets, and the result is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, SemanticError> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let bucket = (fnv1a(tok.as_bytes(), FNV_OFFSET) % self.dim as u64) as usize;
            // independent sign hash: different offset basis
            let sign = if fnv1a(tok.as_bytes(), FNV_OFFSET ^ 0x9e37_79b9_7f4a_7c15) >> 63 == 0 {
                1.0
            } else {
                -1.0
            };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // no tokens, or every bucket cancelled out
            return Err(SemanticError::EmptyText);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize, timeout_secs: u64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            api_key: std::env::var(super::llm::API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, SemanticError> {
        if text.trim().is_empty() {
            return Err(SemanticError::EmptyText);
        }
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let v: Value = req
            .send_json(json!({"model": self.model, "input": text}))
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| SemanticError::Embedding(e.to_string()))?;
        let emb: Vec<f64> = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| SemanticError::Embedding("no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        if emb.len() != self.dim || emb.iter().any(|x| !x.is_finite()) {
            return Err(SemanticError::Embedding(format!(
                "expected {} finite values, got {}",
                self.dim,
                emb.len()
            )));
        }
        Ok(emb)
    }
}
