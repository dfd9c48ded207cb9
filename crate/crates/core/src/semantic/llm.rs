//! Chat-completion clients: a deterministic in-process stub, an
//! OpenAI-compatible HTTP client, and an on-disk response cache wrapper.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::prompt::MBTI_TYPES;
use crate::util::{hash64_hex, write_atomic};

/// Environment variable holding the bearer token for the LLM endpoint.
pub const API_KEY_ENV: &str = "AMCFG_LLM_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("request {prompt_hash} timed out")]
    Timeout { prompt_hash: String },
    #[error("request {prompt_hash} failed with HTTP {status}")]
    Http { status: u16, prompt_hash: String },
    #[error("request {prompt_hash}: malformed response: {detail}")]
    MalformedResponse { prompt_hash: String, detail: String },
    #[error("request {prompt_hash}: transport error: {detail}")]
    Transport { prompt_hash: String, detail: String },
    #[error("response cache at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: 256,
            timeout_secs: 60,
            retries: 2,
            retry_backoff_ms: 500,
            cache_dir: None,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;

    fn model(&self) -> &str;

    fn temperature(&self) -> f64 {
        0.0
    }

    /// Requests that reached the underlying backend (network or stub).
    fn backend_calls(&self) -> usize;
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }

    fn model(&self) -> &str {
        (**self).model()
    }

    fn temperature(&self) -> f64 {
        (**self).temperature()
    }

    fn backend_calls(&self) -> usize {
        (**self).backend_calls()
    }
}

/// Cache key for a (model, temperature, prompt) triple.
pub fn prompt_hash(model: &str, temperature: f64, prompt: &str) -> String {
    let mut buf = Vec::with_capacity(model.len() + prompt.len() + 24);
    buf.extend_from_slice(model.as_bytes());
    buf.push(0);
    buf.extend_from_slice(&temperature.to_bits().to_le_bytes());
    buf.push(0);
    buf.extend_from_slice(prompt.as_bytes());
    hash64_hex(&buf)
}

fn keyword_counts(prompt: &str) -> Vec<(String, usize)> {
    // only the numbered exemplar lines carry cluster content
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in prompt.lines() {
        let t = line.trim_start();
        let Some((num, rest)) = t.split_once(". ") else {
            continue;
        };
        if num.is_empty() || !num.chars().all(|c| c.is_ascii_digit()) {
            continue;
        }
        for tok in rest.split(|c: char| !c.is_alphanumeric()).filter(|s| s.len() > 2) {
            *counts.entry(tok.to_lowercase()).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Deterministic offline stand-in for a chat endpoint.
///
/// Prompts found in the fixed mapping get the mapped text. Anything else gets
/// a response built from the most frequent words of the numbered exemplar
/// lines; MBTI prompts get one of the 16 types chosen by hashing those words.
#[derive(Debug, Default)]
pub struct StubLlm {
    responses: HashMap<String, String>,
    calls: AtomicUsize,
}

impl StubLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_responses(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            calls: AtomicUsize::new(0),
        }
    }

    fn synthesize(prompt: &str) -> String {
        let words: Vec<String> = keyword_counts(prompt).into_iter().take(6).map(|(w, _)| w).collect();
        if prompt.contains("MBTI") {
            let h = hash64_hex(words.join(" ").as_bytes());
            let idx = u64::from_str_radix(&h, 16).unwrap_or(0) % MBTI_TYPES.len() as u64;
            return MBTI_TYPES[idx as usize].to_string();
        }
        if words.is_empty() {
            "general content".to_string()
        } else {
            format!("content about {}", words.join(", "))
        }
    }
}

impl LlmClient for StubLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .responses
            .get(prompt)
            .cloned()
            .unwrap_or_else(|| Self::synthesize(prompt)))
    }

    fn model(&self) -> &str {
        "stub"
    }

    fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// OpenAI-compatible chat-completions client with retries.
pub struct HttpLlm {
    config: LlmClientConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    calls: AtomicUsize,
    fallback: Option<StubLlm>,
}

impl HttpLlm {
    pub fn new(config: LlmClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            agent,
            calls: AtomicUsize::new(0),
            fallback: None,
        }
    }

    /// Answer from the stub once retries are exhausted.
    pub fn with_stub_fallback(mut self) -> Self {
        self.fallback = Some(StubLlm::new());
        self
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    fn attempt(&self, prompt: &str, hash: &str) -> Result<String, (LlmError, bool)> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err((
                    LlmError::Timeout {
                        prompt_hash: hash.to_string(),
                    },
                    true,
                ))
            }
            Err(e) => {
                return Err((
                    LlmError::Transport {
                        prompt_hash: hash.to_string(),
                        detail: e.to_string(),
                    },
                    true,
                ))
            }
        };
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let retryable = status >= 500 || status == 429 || status == 408;
            return Err((
                LlmError::Http {
                    status,
                    prompt_hash: hash.to_string(),
                },
                retryable,
            ));
        }
        let malformed = |detail: String| {
            (
                LlmError::MalformedResponse {
                    prompt_hash: hash.to_string(),
                    detail,
                },
                false,
            )
        };
        let v: Value = resp.body_mut().read_json().map_err(|e| malformed(e.to_string()))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| malformed("no choices[0].message.content".into()))?;
        if text.trim().is_empty() {
            return Err(malformed("empty message content".into()));
        }
        Ok(text.to_string())
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let hash = prompt_hash(&self.config.model, self.config.temperature, prompt);
        let attempts = self.config.retries + 1;
        let mut last = None;
        for i in 0..attempts {
            match self.attempt(prompt, &hash) {
                Ok(text) => return Ok(text),
                Err((e, retryable)) => {
                    warn!(attempt = i + 1, error = %e, "LLM request failed");
                    last = Some(e);
                    if !retryable {
                        break;
                    }
                    if i + 1 < attempts && self.config.retry_backoff_ms > 0 {
                        thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * (1 << i.min(6))));
                    }
                }
            }
        }
        let err = last.expect("at least one attempt");
        match &self.fallback {
            Some(stub) => {
                warn!(prompt_hash = %hash, "falling back to stub LLM");
                stub.complete(prompt)
            }
            None => Err(err),
        }
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt: String,
    pub response: String,
    pub model: String,
    /// Seconds since the Unix epoch at write time.
    pub timestamp: u64,
}

/// Directory of `<prompt-hash>.json` files.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Cache {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Entry for `key` if present and its stored prompt matches.
    pub fn get(&self, key: &str, prompt: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path_for(key)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.prompt == prompt).then_some(entry)
    }

    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let text = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        write_atomic(&path, &text).map_err(|source| LlmError::Cache { path, source })
    }
}

/// Serves repeated prompts from a [`ResponseCache`].
pub struct CachedLlm<C> {
    inner: C,
    cache: ResponseCache,
    hits: AtomicUsize,
}

impl<C: LlmClient> CachedLlm<C> {
    pub fn new(inner: C, cache: ResponseCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicUsize::new(0),
        }
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: LlmClient> LlmClient for CachedLlm<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let key = prompt_hash(self.inner.model(), self.inner.temperature(), prompt);
        if let Some(entry) = self.cache.get(&key, prompt) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            debug!(key = %key, "LLM cache hit");
            return Ok(entry.response);
        }
        let response = self.inner.complete(prompt)?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.cache.put(
            &key,
            &CacheEntry {
                prompt: prompt.to_string(),
                response: response.clone(),
                model: self.inner.model().to_string(),
                timestamp,
            },
        )?;
        Ok(response)
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn backend_calls(&self) -> usize {
        self.inner.backend_calls()
    }
}

/// Sends one prompt through `client`.
pub fn query_llm(client: &dyn LlmClient, prompt: &str) -> Result<String, LlmError> {
    client.complete(prompt)
}
