use std::time::{Duration, Instant};

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ChatResponse, ContentPart, GatewayConfig, GatewayError, ImageRef, TokenLogprob, Usage,
};

const TOP_LOGPROBS: u32 = 5;
const BODY_EXCERPT: usize = 300;

/// Chat-completion backend speaking the common JSON-over-POST protocol.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let token = match &config.auth_token_env_var {
            Some(var) => match std::env::var(var) {
                Ok(t) if !t.is_empty() => Some(t),
                _ => {
                    log::warn!("environment variable {var} is not set; sending requests without a bearer token");
                    None
                }
            },
            None => None,
        };
        Ok(HttpBackend { client, url: config.endpoint_url.clone(), token })
    }
}

fn mime_for(location: &str) -> &'static str {
    let lower = location.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/png"
    }
}

fn image_url(image: &ImageRef) -> Result<String, GatewayError> {
    if let Some(data) = &image.base64 {
        return Ok(format!("data:{};base64,{data}", mime_for(&image.location)));
    }
    if image.is_url() {
        return Ok(image.location.clone());
    }
    let bytes = std::fs::read(&image.location)
        .map_err(|e| GatewayError::InvalidRequest(format!("image {}: {e}", image.location)))?;
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{data}", mime_for(&image.location)))
}

/// Request body in the chat-completions wire shape.
pub(crate) fn request_body(request: &ChatRequest) -> Result<Value, GatewayError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let mut parts = Vec::with_capacity(m.parts.len());
        for p in &m.parts {
            parts.push(match p {
                ContentPart::Text { text } => json!({"type": "text", "text": text}),
                ContentPart::Image { image } => json!({"type": "image_url", "image_url": {"url": image_url(image)?}}),
            });
        }
        messages.push(json!({"role": m.role.as_str(), "content": parts}));
    }
    let mut body = json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "logprobs": request.want_logprobs,
    });
    if request.want_logprobs {
        body["top_logprobs"] = json!(TOP_LOGPROBS);
    }
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

pub(crate) fn decode_response(bytes: &[u8], want_logprobs: bool) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse =
        serde_json::from_slice(bytes).map_err(|e| GatewayError::MalformedPayload(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedPayload("response has no choices".into()))?;
    let text =
        choice.message.content.ok_or_else(|| GatewayError::MalformedPayload("first choice has no content".into()))?;
    let token_logprobs = if want_logprobs { choice.logprobs.and_then(|l| l.content) } else { None };
    Ok(ChatResponse {
        text,
        token_logprobs,
        usage: wire.usage.unwrap_or_default(),
        latency_ms: 0,
        attempts: 0,
        cached: false,
    })
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = request_body(request)?;
        let started = Instant::now();
        let mut call = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            call = call.bearer_auth(token);
        }
        let resp = call.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Remote {
                status: status.as_u16(),
                body: excerpt(&String::from_utf8_lossy(&bytes)),
            });
        }
        let mut out = decode_response(&bytes, request.want_logprobs)?;
        out.latency_ms = started.elapsed().as_millis().max(1) as u64;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcot::Role;
    use crate::gateway::{ChatMessage, DecodingParams};

    #[test]
    fn body_shape() {
        let mut req = ChatRequest::new(
            "policy",
            vec![ChatMessage {
                role: Role::User,
                parts: vec![
                    ContentPart::Image { image: ImageRef { location: "x.jpg".into(), base64: Some("QUJD".into()) } },
                    ContentPart::Text { text: "Real or Fake?".into() },
                ],
            }],
            DecodingParams { want_logprobs: true, seed: Some(9), ..DecodingParams::default() },
        );
        req.max_tokens = 16;
        let body = request_body(&req).unwrap();
        assert_eq!(body["model"], "policy");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["image_url"]["url"], "data:image/jpeg;base64,QUJD");
        assert_eq!(body["messages"][0]["content"][1]["text"], "Real or Fake?");
        assert_eq!(body["max_tokens"], 16);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 5);
        assert_eq!(body["seed"], 9);
    }

    #[test]
    fn decode() {
        let raw = br#"{"choices":[{"message":{"role":"assistant","content":"Fake"},
            "logprobs":{"content":[{"token":"Fake","logprob":-0.1,"top_logprobs":[{"token":"Fake","logprob":-0.1},{"token":"Real","logprob":-2.4}]}]}}],
            "usage":{"prompt_tokens":12,"completion_tokens":1}}"#;
        let r = decode_response(raw, true).unwrap();
        assert_eq!(r.text, "Fake");
        assert_eq!(r.usage.prompt_tokens, 12);
        assert_eq!(r.token_logprobs.as_ref().unwrap()[0].top_logprobs[1].token, "Real");
        assert!(decode_response(raw, false).unwrap().token_logprobs.is_none());
        assert!(matches!(decode_response(b"{\"choices\":[]}", false), Err(GatewayError::MalformedPayload(_))));
        assert!(matches!(decode_response(b"<html>", false), Err(GatewayError::MalformedPayload(_))));
    }

    #[test]
    fn excerpt_truncates_on_char_boundary() {
        let long = "é".repeat(400);
        assert!(excerpt(&long).ends_with("..."));
        assert_eq!(excerpt("short"), "short");
    }
}
