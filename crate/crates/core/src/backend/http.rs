//! OpenAI-compatible `POST /chat/completions` provider with retries.

use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use tracing::{debug, warn};

use super::{BackendError, BackendSpec, ChatRequest, Provider, RetryPolicy};

pub struct HttpProvider {
    name: String,
    url: String,
    api_key_env: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Transient(String),
}

impl HttpProvider {
    pub fn new(spec: &BackendSpec) -> Result<Self, BackendError> {
        let base = spec.base_url.as_deref().ok_or_else(|| {
            BackendError::Config(format!("backend {:?} has no base_url", spec.name))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(HttpProvider {
            name: spec.name.clone(),
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key_env: spec.api_key_env.clone(),
            retry: spec.retry.clone(),
            client,
        })
    }

    fn attempt(&self, req: &ChatRequest, api_key: Option<&str>) -> Result<Attempt, BackendError> {
        let body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Transient(e.to_string())),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Attempt::Transient(format!("HTTP {status}")));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Transient(e.to_string())),
        };
        if !status.is_success() {
            return Err(BackendError::Http {
                backend: self.name.clone(),
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| BackendError::Http {
                backend: self.name.clone(),
                status: status.as_u16(),
                body: format!("unreadable completion body ({e}): {text}"),
            })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Attempt::Done(content))
    }
}

impl Provider for HttpProvider {
    fn call(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let api_key = match &self.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingApiKey {
                backend: self.name.clone(),
                var: var.clone(),
            })?),
            None => None,
        };
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let delay = self
                    .retry
                    .base_backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                debug!(backend = %self.name, attempt, delay, "retrying");
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(req, api_key.as_deref())? {
                Attempt::Done(text) => return Ok(text),
                Attempt::Transient(err) => {
                    warn!(backend = %self.name, attempt, error = %err, "transient failure");
                    last_error = err;
                }
            }
        }
        Err(BackendError::BackendExhausted {
            backend: self.name.clone(),
            attempts: self.retry.max_attempts,
            last_error,
        })
    }
}
