//! Chat-completion abstraction shared by every model-facing stage.
//!
//! A [`BackendPool`] owns the configured providers, the response cache and
//! per-backend concurrency limits. Stages talk to it through an [`Endpoint`],
//! which fixes backend name, model and sampling parameters.

mod cache;
mod http;
mod limiter;
mod scripted;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CacheStats, ResponseCache};
pub use http::HttpProvider;
pub use limiter::Limiter;
pub use scripted::{scripted_lookup, ScriptTable};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("backend {backend:?} gave up after {attempts} attempts: {last_error}")]
    BackendExhausted {
        backend: String,
        attempts: u32,
        last_error: String,
    },
    #[error("no scripted response for stage {stage:?} scope {scope:?} sample {sample_index} (key {key})")]
    ScriptMiss {
        stage: Option<String>,
        scope: Option<String>,
        sample_index: u32,
        key: String,
    },
    #[error("backend {backend:?} returned HTTP {status}: {body}")]
    Http {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("backend {backend:?}: environment variable {var} is not set")]
    MissingApiKey { backend: String, var: String },
    #[error("cache integrity violation for key {key}: existing entry differs")]
    CacheIntegrity { key: String },
    #[error("cache i/o error: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_name: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated stochastic samples of an otherwise identical request.
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub from_cache: bool,
}

/// 64-char lowercase hex SHA-256 over a canonical JSON serialization of the request.
pub fn cache_key(req: &ChatRequest) -> String {
    // Struct field order fixes the serialization order.
    let canonical = serde_json::to_vec(req).expect("request serialization cannot fail");
    hex::encode(Sha256::digest(&canonical))
}

/// Prefix of the system message that identifies the pipeline stage and the
/// item the request is about. Scripted backends key on it.
pub fn stage_header(stage: &str, scope: &str) -> String {
    format!("[stage:{stage}] [scope:{scope}]")
}

fn bracket_value<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let open = format!("[{label}:");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(']')? + start;
    Some(&text[start..end])
}

/// Extracts `(stage, scope)` from the first system message, if tagged.
pub fn request_tags(req: &ChatRequest) -> (Option<&str>, Option<&str>) {
    let system = req.messages.iter().find(|m| m.role == Role::System);
    match system {
        Some(m) => {
            let head = m.content.lines().next().unwrap_or("");
            (bracket_value(head, "stage"), bracket_value(head, "scope"))
        }
        None => (None, None),
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpOpenaiCompatible,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

fn default_rate_limit() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub script: Option<PathBuf>,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Maximum in-flight requests.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |msg: &str| {
            Err(BackendError::Config(format!(
                "backend {:?}: {msg}",
                self.name
            )))
        };
        if self.name.trim().is_empty() {
            return fail("name must be nonempty");
        }
        if self.retry.max_attempts < 1 {
            return fail("retry.max_attempts must be >= 1");
        }
        if self.rate_limit < 1 {
            return fail("rate_limit must be >= 1");
        }
        match self.kind {
            BackendKind::HttpOpenaiCompatible if self.base_url.is_none() => {
                fail("http_openai_compatible backends require base_url")
            }
            BackendKind::Scripted if self.script.is_none() => {
                fail("scripted backends require script")
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Providers and the pool
// ---------------------------------------------------------------------------

/// Something that turns a request into model text.
pub trait Provider: Send + Sync {
    fn call(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// The interface stages depend on.
pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
    /// Model name for a configured backend.
    fn model_of(&self, backend: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    provider_calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
}

struct Slot {
    model: String,
    provider: Arc<dyn Provider>,
    limiter: Limiter,
}

pub struct BackendPool {
    slots: HashMap<String, Slot>,
    cache: Option<ResponseCache>,
    counters: Counters,
}

impl BackendPool {
    pub fn new(cache: Option<ResponseCache>) -> Self {
        BackendPool {
            slots: HashMap::new(),
            cache,
            counters: Counters::default(),
        }
    }

    /// Builds providers for each spec. Script paths must already be resolved.
    pub fn from_specs(
        specs: &[BackendSpec],
        cache: Option<ResponseCache>,
    ) -> Result<Self, BackendError> {
        let mut pool = BackendPool::new(cache);
        for spec in specs {
            spec.validate()?;
            let provider: Arc<dyn Provider> = match spec.kind {
                BackendKind::Scripted => {
                    let path = spec.script.as_ref().expect("validated");
                    Arc::new(ScriptTable::load(path)?)
                }
                BackendKind::HttpOpenaiCompatible => Arc::new(HttpProvider::new(spec)?),
            };
            pool.register(&spec.name, &spec.model, provider, spec.rate_limit)?;
        }
        Ok(pool)
    }

    pub fn register(
        &mut self,
        name: &str,
        model: &str,
        provider: Arc<dyn Provider>,
        max_in_flight: usize,
    ) -> Result<(), BackendError> {
        if self.slots.contains_key(name) {
            return Err(BackendError::Config(format!(
                "duplicate backend name {name:?}"
            )));
        }
        self.slots.insert(
            name.to_owned(),
            Slot {
                model: model.to_owned(),
                provider,
                limiter: Limiter::new(max_in_flight),
            },
        );
        Ok(())
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            requests: self.counters.requests.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            provider_calls: self.counters.provider_calls.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }
}

impl ChatClient for BackendPool {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let slot = self
            .slots
            .get(&req.backend_name)
            .ok_or_else(|| BackendError::UnknownBackend(req.backend_name.clone()))?;
        self.counters.requests.fetch_add(1, Ordering::SeqCst);

        let key = cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key)? {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(ChatResponse {
                    text: entry.text,
                    from_cache: true,
                });
            }
        }

        let text = {
            let _permit = slot.limiter.acquire();
            self.counters.provider_calls.fetch_add(1, Ordering::SeqCst);
            slot.provider.call(req)?
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(ChatResponse {
            text,
            from_cache: false,
        })
    }

    fn model_of(&self, backend: &str) -> Result<String, BackendError> {
        self.slots
            .get(backend)
            .map(|s| s.model.clone())
            .ok_or_else(|| BackendError::UnknownBackend(backend.to_owned()))
    }
}

/// A prompt addressed to one stage, before it is bound to a backend.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub stage: String,
    pub scope: String,
    pub system: String,
    pub user: String,
    /// Extra user messages appended after the main prompt (format reminders).
    pub reminders: Vec<String>,
}

impl Prompt {
    pub fn new(stage: &str, scope: impl Into<String>, system: &str, user: String) -> Self {
        Prompt {
            stage: stage.to_owned(),
            scope: scope.into(),
            system: system.to_owned(),
            user,
            reminders: Vec::new(),
        }
    }

    pub fn messages(&self) -> Vec<Message> {
        let mut system = stage_header(&self.stage, &self.scope);
        if !self.system.is_empty() {
            system.push('\n');
            system.push_str(&self.system);
        }
        let mut msgs = vec![Message::system(system), Message::user(self.user.clone())];
        msgs.extend(self.reminders.iter().cloned().map(Message::user));
        msgs
    }
}

/// A backend bound to sampling parameters; what stages call.
#[derive(Clone)]
pub struct Endpoint<'a> {
    client: &'a dyn ChatClient,
    pub backend: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl<'a> Endpoint<'a> {
    pub fn new(
        client: &'a dyn ChatClient,
        backend: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, BackendError> {
        let model = client.model_of(backend)?;
        Ok(Endpoint {
            client,
            backend: backend.to_owned(),
            model,
            temperature,
            max_tokens,
        })
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        Endpoint {
            temperature,
            ..self.clone()
        }
    }

    pub fn request(&self, prompt: &Prompt, sample_index: u32) -> ChatRequest {
        ChatRequest {
            backend_name: self.backend.clone(),
            model: self.model.clone(),
            messages: prompt.messages(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            sample_index,
        }
    }

    pub fn ask(&self, prompt: &Prompt, sample_index: u32) -> Result<ChatResponse, BackendError> {
        self.client.complete(&self.request(prompt, sample_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn req(sample_index: u32) -> ChatRequest {
        ChatRequest {
            backend_name: "b".into(),
            model: "m".into(),
            messages: vec![Message::system("[stage:s] [scope:d1]"), Message::user("hi")],
            temperature: 1.0,
            max_tokens: 64,
            sample_index,
        }
    }

    #[test]
    fn cache_key_is_stable_hex() {
        let k = cache_key(&req(0));
        assert_eq!(k, cache_key(&req(0)));
        assert_eq!(k.len(), 64);
        assert!(k.chars().all(|c| matches!(c, '0'..='9' | 'a'..='f')));
        assert_ne!(k, cache_key(&req(1)));
    }

    #[test]
    fn cache_key_sensitive_to_every_field() {
        let base = req(0);
        let k = cache_key(&base);
        let mut variants = vec![];
        let mut r = base.clone();
        r.backend_name = "c".into();
        variants.push(r);
        let mut r = base.clone();
        r.model = "n".into();
        variants.push(r);
        let mut r = base.clone();
        r.messages[1].content = "ho".into();
        variants.push(r);
        let mut r = base.clone();
        r.temperature = 0.5;
        variants.push(r);
        let mut r = base.clone();
        r.max_tokens = 65;
        variants.push(r);
        for v in variants {
            assert_ne!(cache_key(&v), k);
        }
    }

    #[test]
    fn tags_are_read_from_system_message() {
        let r = req(0);
        assert_eq!(request_tags(&r), (Some("s"), Some("d1")));
    }

    #[test]
    fn spec_validation() {
        let mut spec = BackendSpec {
            name: "x".into(),
            kind: BackendKind::HttpOpenaiCompatible,
            base_url: None,
            script: None,
            model: "m".into(),
            api_key_env: None,
            retry: RetryPolicy::default(),
            rate_limit: 1,
            timeout_ms: 1000,
        };
        assert!(spec.validate().is_err());
        spec.base_url = Some("http://localhost".into());
        assert!(spec.validate().is_ok());
        spec.kind = BackendKind::Scripted;
        assert!(spec.validate().is_err());
        spec.script = Some("s.json".into());
        assert!(spec.validate().is_ok());
        spec.retry.max_attempts = 0;
        assert!(spec.validate().is_err());
    }

    struct Counting(Mutex<u32>);

    impl Provider for Counting {
        fn call(&self, _req: &ChatRequest) -> Result<String, BackendError> {
            *self.0.lock().unwrap() += 1;
            Ok(String::new())
        }
    }

    #[test]
    fn cached_request_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let provider = Arc::new(Counting(Mutex::new(0)));
        let mut pool = BackendPool::new(Some(ResponseCache::open(dir.path()).unwrap()));
        pool.register("b", "m", provider.clone(), 2).unwrap();

        let first = pool.complete(&req(0)).unwrap();
        assert!(!first.from_cache);
        // Empty text is a valid, cacheable result.
        assert_eq!(first.text, "");
        let second = pool.complete(&req(0)).unwrap();
        assert!(second.from_cache);
        assert_eq!(*provider.0.lock().unwrap(), 1);
        assert_eq!(
            pool.stats(),
            PoolStats {
                requests: 2,
                cache_hits: 1,
                provider_calls: 1
            }
        );
    }

    #[test]
    fn unknown_backend() {
        let pool = BackendPool::new(None);
        assert!(matches!(
            pool.complete(&req(0)),
            Err(BackendError::UnknownBackend(_))
        ));
    }
}
