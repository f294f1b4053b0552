//! Chat-completions gateway: one choke point for every model call, with a
//! content-addressed disk cache, bounded retries and a global in-flight cap.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::model::cache_key;

/// Decoding temperature for every call; fixed so repeated runs are comparable.
pub const CHAT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failed (status {0})")]
    AuthFailure(u16),
    #[error("request rejected (status {status}): {detail}")]
    Rejected { status: u16, detail: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response carries no logprobs")]
    NoLogprobs,
    #[error("cache io: {0}")]
    CacheIo(String),
}

impl GatewayError {
    /// Only transport-level failures (network errors and 5xx) are retried.
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".to_string(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".to_string(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: CHAT_TEMPERATURE,
            want_logprobs: false,
            max_tokens: None,
        }
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub model_id: String,
    #[serde(default)]
    pub cached: bool,
}

fn normalize_ws(s: &str) -> String {
    s.replace("\r\n", "\n")
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// Canonical byte encoding of a request: fixed field order and whitespace
/// normalized prompt text, so the cache key only depends on
/// (model, messages, temperature, logprobs flag, max_tokens).
pub fn canonical_request_bytes(req: &ChatRequest) -> Vec<u8> {
    #[derive(Serialize)]
    struct CanonicalMessage<'a> {
        role: &'a str,
        content: String,
    }
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a str,
        messages: Vec<CanonicalMessage<'a>>,
        temperature: f64,
        logprobs: bool,
        max_tokens: Option<u32>,
    }
    let canonical = Canonical {
        model: &req.model_id,
        messages: req
            .messages
            .iter()
            .map(|m| CanonicalMessage {
                role: &m.role,
                content: normalize_ws(&m.content),
            })
            .collect(),
        temperature: req.temperature,
        logprobs: req.want_logprobs,
        max_tokens: req.max_tokens,
    };
    serde_json::to_vec(&canonical).expect("canonical request serializes")
}

pub fn request_cache_key(req: &ChatRequest) -> String {
    cache_key(&canonical_request_bytes(req))
}

/// Transport for chat requests. Implemented by the HTTP backend and by
/// scripted in-memory backends for tests.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

// Wire format of an OpenAI-compatible chat completions endpoint.
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

/// HTTP backend speaking the chat-completions wire format. `endpoint` is the
/// full URL of the completions route; the key, when present, is sent as a
/// bearer token.
pub struct HttpChatBackend {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::Client,
}

impl HttpChatBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatBackend {
            endpoint: endpoint.into(),
            api_key,
            http: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl ChatBackend for HttpChatBackend {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = WireRequest {
            model: &req.model_id,
            messages: &req.messages,
            temperature: req.temperature,
            logprobs: req.want_logprobs,
            max_tokens: req.max_tokens,
        };
        let mut http_req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http_req = http_req.bearer_auth(key);
        }
        let response = http_req
            .send()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(GatewayError::AuthFailure(status.as_u16()));
        }
        let text = response
            .text()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(GatewayError::Transport(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(GatewayError::Rejected {
                status: status.as_u16(),
                detail: text,
            });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("no choices".to_string()))?;
        Ok(ChatResponse {
            text: choice.message.content,
            token_logprobs: choice.logprobs.map(|l| l.content),
            model_id: wire.model.unwrap_or_else(|| req.model_id.clone()),
            cached: false,
        })
    }
}

/// One scripted reply: fires when `needle` occurs in the last user message.
#[derive(Debug, Clone)]
pub struct ScriptedReply {
    pub needle: String,
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Deterministic in-memory backend for tests and offline runs. Replies are
/// matched in order against the last user message; `jitter_ms` injects random
/// latency to exercise concurrency without changing any payload.
pub struct ScriptedChatBackend {
    replies: Vec<ScriptedReply>,
    pub jitter_ms: Option<std::ops::Range<u64>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl ScriptedChatBackend {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        ScriptedChatBackend {
            replies,
            jitter_ms: None,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn with_jitter(mut self, range: std::ops::Range<u64>) -> Self {
        self.jitter_ms = Some(range);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatBackend for ScriptedChatBackend {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        if let Some(range) = &self.jitter_ms {
            let ms = {
                use rand::Rng;
                rand::thread_rng().gen_range(range.clone())
            };
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
        let last_user = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        for reply in &self.replies {
            if last_user.contains(&reply.needle) {
                return Ok(ChatResponse {
                    text: reply.text.clone(),
                    token_logprobs: reply.token_logprobs.clone(),
                    model_id: req.model_id.clone(),
                    cached: false,
                });
            }
        }
        Err(GatewayError::Rejected {
            status: 400,
            detail: format!("no scripted reply matches: {last_user}"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Retry budget for transport failures; total attempts are retries + 1.
    pub retries: u32,
    /// Initial backoff, doubled after each retry.
    pub backoff: Duration,
    /// Global cap on concurrent outbound requests.
    pub max_in_flight: usize,
    /// Response cache directory; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            retries: 2,
            backoff: Duration::from_millis(500),
            max_in_flight: 8,
            cache_dir: None,
        }
    }
}

/// The gateway proper: cache lookup, bounded concurrency, retry loop.
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    cfg: GatewayConfig,
    limiter: Arc<Semaphore>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: GatewayConfig) -> Self {
        let limiter = Arc::new(Semaphore::new(cfg.max_in_flight.max(1)));
        LlmGateway {
            backend,
            cfg,
            limiter,
        }
    }

    /// The in-flight limiter, shared with other outbound clients (e.g. web
    /// search) so the whole pipeline respects one budget.
    pub fn limiter(&self) -> Arc<Semaphore> {
        Arc::clone(&self.limiter)
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cfg.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn read_cache(&self, key: &str) -> Option<ChatResponse> {
        let path = self.cache_path(key)?;
        let bytes = std::fs::read(&path).ok()?;
        // An unreadable or corrupt cache file is treated as a miss and will be
        // overwritten by the fresh response.
        serde_json::from_slice::<ChatResponse>(&bytes).ok()
    }

    fn write_cache(&self, key: &str, resp: &ChatResponse) -> Result<(), GatewayError> {
        let Some(path) = self.cache_path(key) else {
            return Ok(());
        };
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        // Write-then-rename so concurrent readers never observe a torn file.
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        let body = serde_json::to_vec(resp).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        std::fs::write(&tmp, body).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        Ok(())
    }

    /// Complete a chat request. Cache hits return immediately with
    /// `cached = true` and byte-identical text; misses go to the backend under
    /// the in-flight limiter, retrying transport failures with doubling
    /// backoff. 4xx responses are never retried.
    pub async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request_cache_key(req);
        if let Some(mut hit) = self.read_cache(&key) {
            hit.cached = true;
            return Ok(hit);
        }
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let mut attempt = 0u32;
        let mut delay = self.cfg.backoff;
        let response = loop {
            match self.backend.send(req).await {
                Ok(resp) => break resp,
                Err(err) if err.retryable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                }
                Err(err) => return Err(err),
            }
        };
        let response = ChatResponse {
            cached: false,
            ..response
        };
        self.write_cache(&key, &response)?;
        Ok(response)
    }
}

fn clean_token(token: &str) -> String {
    token
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// Scan a response's token logprobs for any of `targets` (tokens are
/// case-folded and stripped of surrounding whitespace/punctuation first).
/// Returns the matched target and its logprob, or `(None, sum of all token
/// logprobs)` when nothing matches.
pub fn extract_target_logprob(
    resp: &ChatResponse,
    targets: &[&str],
) -> Result<(Option<String>, f64), GatewayError> {
    let tokens = resp.token_logprobs.as_ref().ok_or(GatewayError::NoLogprobs)?;
    for t in tokens {
        let cleaned = clean_token(&t.token);
        if targets.contains(&cleaned.as_str()) {
            return Ok((Some(cleaned), t.logprob));
        }
    }
    Ok((None, tokens.iter().map(|t| t.logprob).sum()))
}
