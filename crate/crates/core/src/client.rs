//! Chat-completion client with retries, a per-endpoint concurrency limit,
//! and an on-disk record/replay cassette for offline deterministic runs.
//!
//! Requests go to `{base_url}/chat/completions` with an OpenAI-style body
//! (`messages` array in, `choices[0].message.content` out). Every request is
//! keyed by a stable hash of (model, messages, temperature, replicate_index);
//! `replicate_index` is a client-side discriminator so repeated samples of an
//! identical prompt occupy distinct cassette entries. It is never sent to the
//! server.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::error::{excerpt, Error, Result};

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
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// One chat-completion request. `replicate_index` distinguishes
/// otherwise-identical sampled calls in the cassette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub replicate_index: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(Error::Validation(
                "chat request must contain at least one user message".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(Error::Validation(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A chat-completion-compatible server plus client-side limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub auth_token_env: Option<String>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_concurrency: usize,
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency < 1 {
            return Err(Error::Validation("max_concurrency must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::Validation("timeout must be > 0".into()));
        }
        Ok(())
    }
}

mod duration_secs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// Read-through cache: serve recorded entries, query and persist misses.
    Record,
    /// Never touch the network; a missing entry is an error.
    Replay,
    /// Always query the network; never touch the disk.
    Passthrough,
}

/// One persisted request/response pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub model: String,
    pub request: ChatRequest,
    pub response_text: String,
    pub recorded_at: String,
}

/// On-disk store of model responses, one file per request key.
#[derive(Debug, Clone)]
pub struct Cassette {
    pub directory: PathBuf,
    pub mode: CassetteMode,
}

impl Cassette {
    pub fn new(directory: impl Into<PathBuf>, mode: CassetteMode) -> Self {
        Self { directory: directory.into(), mode }
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.directory.join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entry_path(key).exists()
    }

    pub fn load(&self, key: &str) -> Result<Option<CassetteEntry>> {
        let path = self.entry_path(key);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path)?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    /// Persist one entry atomically (write-temp-then-rename). Safe under
    /// concurrent writers because each key maps to its own file.
    pub fn store(&self, entry: &CassetteEntry) -> Result<()> {
        std::fs::create_dir_all(&self.directory)?;
        let path = self.entry_path(&entry.key);
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        let mut bytes = serde_json::to_vec_pretty(entry)?;
        bytes.push(b'\n');
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Author an entry directly, e.g. when building fixture cassettes.
    pub fn insert_response(
        &self,
        model: &str,
        request: &ChatRequest,
        response_text: impl Into<String>,
    ) -> Result<String> {
        let key = cassette_key(model, request);
        self.store(&CassetteEntry {
            key: key.clone(),
            model: model.to_string(),
            request: request.clone(),
            response_text: response_text.into(),
            recorded_at: "1970-01-01T00:00:00Z".into(),
        })?;
        Ok(key)
    }
}

/// Stable cache key: SHA-256 over the canonical JSON encoding of
/// (model, messages, temperature, replicate_index).
pub fn cassette_key(model: &str, request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model: &'a str,
        messages: &'a [ChatMessage],
        temperature: f64,
        replicate_index: u32,
    }
    let canonical = serde_json::to_vec(&KeyMaterial {
        model,
        messages: &request.messages,
        temperature: request.temperature,
        replicate_index: request.replicate_index,
    })
    .expect("key material serializes");
    hex::encode(Sha256::digest(&canonical))
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Completion-call counters, used by reports and by tests that assert
/// skip rules (e.g. no leave-one-out calls for neutral checklists).
#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct CallStats {
    pub completions: u64,
    pub replay_hits: u64,
    pub network_calls: u64,
    pub recorded: u64,
}

#[derive(Debug, Default)]
struct AtomicStats {
    completions: AtomicU64,
    replay_hits: AtomicU64,
    network_calls: AtomicU64,
    recorded: AtomicU64,
}

/// Client for one endpoint. Holds the concurrency semaphore, so at most
/// `max_concurrency` requests are in flight per endpoint at any instant.
pub struct LlmClient {
    endpoint: ModelEndpoint,
    http: reqwest::Client,
    semaphore: Semaphore,
    stats: AtomicStats,
    retry_base_delay: Duration,
}

const MAX_ATTEMPTS: u32 = 3;

impl LlmClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let http = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            semaphore: Semaphore::new(endpoint.max_concurrency),
            http,
            endpoint,
            stats: AtomicStats::default(),
            retry_base_delay: Duration::from_millis(200),
        })
    }

    #[doc(hidden)]
    pub fn with_retry_base_delay(mut self, delay: Duration) -> Self {
        self.retry_base_delay = delay;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            completions: self.stats.completions.load(Ordering::Relaxed),
            replay_hits: self.stats.replay_hits.load(Ordering::Relaxed),
            network_calls: self.stats.network_calls.load(Ordering::Relaxed),
            recorded: self.stats.recorded.load(Ordering::Relaxed),
        }
    }

    /// Resolve one request to assistant text, honoring the cassette mode.
    pub async fn complete(&self, request: &ChatRequest, cassette: &Cassette) -> Result<String> {
        request.validate()?;
        self.stats.completions.fetch_add(1, Ordering::Relaxed);
        let key = cassette_key(&self.endpoint.model_name, request);

        match cassette.mode {
            CassetteMode::Replay => match cassette.load(&key)? {
                Some(entry) => {
                    self.stats.replay_hits.fetch_add(1, Ordering::Relaxed);
                    Ok(entry.response_text)
                }
                None => Err(Error::CassetteMiss { key }),
            },
            CassetteMode::Record => {
                if let Some(entry) = cassette.load(&key)? {
                    self.stats.replay_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(entry.response_text);
                }
                let text = self.complete_network(request).await?;
                cassette.store(&CassetteEntry {
                    key: key.clone(),
                    model: self.endpoint.model_name.clone(),
                    request: request.clone(),
                    response_text: text.clone(),
                    recorded_at: chrono::Utc::now().to_rfc3339(),
                })?;
                self.stats.recorded.fetch_add(1, Ordering::Relaxed);
                Ok(text)
            }
            CassetteMode::Passthrough => self.complete_network(request).await,
        }
    }

    async fn complete_network(&self, request: &ChatRequest) -> Result<String> {
        let _permit = self
            .semaphore
            .acquire()
            .await
            .map_err(|_| Error::Transport("client semaphore closed".into()))?;
        self.stats.network_calls.fetch_add(1, Ordering::Relaxed);

        let url = format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        );
        let body = WireRequest {
            model: &self.endpoint.model_name,
            messages: &request.messages,
            temperature: request.temperature,
        };
        let auth = match &self.endpoint.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Validation(format!("credential environment variable {var} is not set"))
            })?),
            None => None,
        };

        let mut last_error = None;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                tokio::time::sleep(self.retry_base_delay * 2u32.pow(attempt - 1)).await;
            }
            let mut req = self.http.post(&url).json(&body);
            if let Some(token) = &auth {
                req = req.bearer_auth(token);
            }
            match req.send().await {
                Err(e) => last_error = Some(Error::Transport(e.to_string())),
                Ok(resp) => {
                    let status = resp.status();
                    if !status.is_success() {
                        let text = resp.text().await.unwrap_or_default();
                        last_error = Some(Error::Status {
                            status: status.as_u16(),
                            body_excerpt: excerpt(&text),
                        });
                        continue;
                    }
                    let parsed: WireResponse = resp
                        .json()
                        .await
                        .map_err(|e| Error::Transport(format!("malformed response body: {e}")))?;
                    let choice = parsed.choices.into_iter().next().ok_or_else(|| {
                        Error::Transport("response contained no choices".into())
                    })?;
                    return Ok(choice.message.content);
                }
            }
        }
        Err(last_error.unwrap_or_else(|| Error::Transport("request failed".into())))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}
