//! Chat-completion client for the policy, teacher and judge models: request
//! types, fingerprints, retrying and bounded-concurrency dispatch, an HTTP
//! backend, a response cache and a deterministic mock.

mod cache;
mod client;
mod http;
mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fcot::{PromptMessage, Role};

pub use cache::ResponseCache;
pub use client::{backoff_schedule, ChatBackend, Gateway};
pub use http::HttpBackend;
pub use mock::{MockReply, MockResponder, MockStats};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Local path or URL.
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base64: Option<String>,
}

impl ImageRef {
    pub fn new(location: impl Into<String>) -> Self {
        ImageRef { location: location.into(), base64: None }
    }

    /// Reads a local file and keeps its bytes inline.
    pub fn inline(path: &Path) -> Result<Self, GatewayError> {
        let bytes =
            std::fs::read(path).map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Ok(ImageRef {
            location: path.display().to_string(),
            base64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
        })
    }

    pub fn is_url(&self) -> bool {
        ["http://", "https://", "data:"].iter().any(|p| self.location.starts_with(p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage { role, parts: vec![ContentPart::Text { text: text.into() }] }
    }

    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl From<PromptMessage> for ChatMessage {
    fn from(m: PromptMessage) -> Self {
        ChatMessage::text(m.role, m.content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams { temperature: 0.0, max_tokens: 1024, want_logprobs: false, seed: None }
    }
}

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A process-unique request id.
pub fn next_request_id() -> String {
    format!("req-{}-{}", std::process::id(), REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub request_id: String,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>, params: DecodingParams) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            want_logprobs: params.want_logprobs,
            seed: params.seed,
            request_id: next_request_id(),
        }
    }

    /// Builds a request from rendered prompt messages, attaching `image` as
    /// the first part of the first user message.
    pub fn from_prompt(
        model_id: impl Into<String>,
        prompt: Vec<PromptMessage>,
        image: Option<ImageRef>,
        params: DecodingParams,
    ) -> Self {
        let mut messages: Vec<ChatMessage> = prompt.into_iter().map(ChatMessage::from).collect();
        if let Some(image) = image {
            match messages.iter_mut().find(|m| m.role == Role::User) {
                Some(m) => m.parts.insert(0, ContentPart::Image { image }),
                None => messages.push(ChatMessage { role: Role::User, parts: vec![ContentPart::Image { image }] }),
            }
        }
        ChatRequest::new(model_id, messages, params)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(format!("{}: {m}", self.request_id)));
        if self.messages.is_empty() {
            return bad("no messages");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a non-negative number");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        for m in &self.messages {
            if m.parts.is_empty() {
                return bad("message without parts");
            }
            if m.parts.iter().any(|p| matches!(p, ContentPart::Text { text } if text.is_empty())) {
                return bad("empty text part");
            }
        }
        Ok(())
    }

    /// Text of every message, in order.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(ChatMessage::text_content).collect::<Vec<_>>().join("\n")
    }

    /// SHA-256 over the model, the messages and the decoding parameters.
    /// The request id is not part of the fingerprint.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            max_tokens: u32,
            logprobs: bool,
            seed: Option<u64>,
        }
        let canonical = Canonical {
            model: &self.model_id,
            messages: &self.messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            logprobs: self.want_logprobs,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&canonical).expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub cached: bool,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            token_logprobs: None,
            usage: Usage::default(),
            latency_ms: 0,
            attempts: 0,
            cached: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_backoff_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, backoff_base_ms: 500, max_backoff_ms: 30_000, jitter: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env_var: Option<String>,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            auth_token_env_var: Some("VRAG_API_TOKEN".into()),
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
            max_inflight: 8,
            cache_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.max_inflight == 0 {
            return Err(GatewayError::Config("max_inflight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote returned {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("no scripted response for request {0}")]
    UnscriptedRequest(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl GatewayError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Remote { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}
