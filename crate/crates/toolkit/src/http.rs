//! Hosted chat-completion providers over HTTP.
//!
//! Two payload dialects are supported. Local images are inlined as base64 at
//! send time. The API key is read from the named environment variable on
//! every call and never stored.
//!
//! | request field | `openai_chat`                        | `gemini`                                   |
//! |---------------|--------------------------------------|--------------------------------------------|
//! | system        | leading `system` message             | `systemInstruction.parts[0].text`          |
//! | user text     | `{"type":"text","text":…}`           | `{"text":…}`                               |
//! | image         | `{"type":"image_url","image_url":{"url":"data:…"}}` | `inline_data` / `file_data` |
//! | assistant     | `role: "assistant"`, string content  | `role: "model"`                            |
//! | temperature   | `temperature`                        | `generationConfig.temperature`             |
//! | max_tokens    | `max_tokens`                         | `generationConfig.maxOutputTokens`         |
//! | seed          | `seed`                               | `generationConfig.seed`                    |
//! | auth          | `Authorization: Bearer <key>`        | `x-goog-api-key: <key>`                    |

use std::time::Duration;

use base64::Engine as _;
use m3cot_core::chat::{
    BackendError, ChatRequest, ChatResponse, ContentPart, FinishReason, ImageRef, ImageSource, Role, Usage,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{Provider, ProviderError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    #[default]
    OpenaiChat,
    Gemini,
}

pub struct HostedHttp {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key_env: String,
    dialect: Dialect,
}

impl std::fmt::Debug for HostedHttp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostedHttp")
            .field("endpoint", &self.endpoint)
            .field("api_key_env", &self.api_key_env)
            .field("dialect", &self.dialect)
            .finish()
    }
}

impl HostedHttp {
    pub fn new(endpoint: &str, api_key_env: &str, dialect: Dialect, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.to_string(), api_key_env: api_key_env.to_string(), dialect })
    }

    fn image_bytes(image: &ImageRef) -> Result<String, ProviderError> {
        match image.source {
            ImageSource::InlineBase64 => Ok(image.value.clone()),
            ImageSource::LocalPath => std::fs::read(&image.value)
                .map(|b| base64::engine::general_purpose::STANDARD.encode(b))
                .map_err(|e| ProviderError::Fatal(BackendError::ImageUnreadable(format!("{}: {e}", image.value)))),
            ImageSource::Uri => unreachable!("URIs are passed by reference"),
        }
    }

    pub fn body(&self, request: &ChatRequest) -> Result<Value, ProviderError> {
        match self.dialect {
            Dialect::OpenaiChat => openai_body(request),
            Dialect::Gemini => gemini_body(request),
        }
    }
}

fn openai_body(request: &ChatRequest) -> Result<Value, ProviderError> {
    let mut messages = Vec::new();
    if !request.system.is_empty() {
        messages.push(json!({"role": "system", "content": request.system}));
    }
    for turn in &request.turns {
        match turn.role {
            Role::Assistant => messages.push(json!({"role": "assistant", "content": turn.joined_text()})),
            Role::User => {
                let mut content = Vec::new();
                for part in &turn.parts {
                    match part {
                        ContentPart::Text { text } => content.push(json!({"type": "text", "text": text})),
                        ContentPart::Image { image } => {
                            let url = match image.source {
                                ImageSource::Uri => image.value.clone(),
                                _ => format!("data:{};base64,{}", image.media_type, HostedHttp::image_bytes(image)?),
                            };
                            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
                        }
                    }
                }
                messages.push(json!({"role": "user", "content": content}));
            }
        }
    }
    let mut body = json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    Ok(body)
}

fn gemini_body(request: &ChatRequest) -> Result<Value, ProviderError> {
    let mut contents = Vec::new();
    for turn in &request.turns {
        let mut parts = Vec::new();
        for part in &turn.parts {
            match part {
                ContentPart::Text { text } => parts.push(json!({"text": text})),
                ContentPart::Image { image } if image.source == ImageSource::Uri => {
                    parts.push(json!({"file_data": {"mime_type": image.media_type, "file_uri": image.value}}))
                }
                ContentPart::Image { image } => parts.push(
                    json!({"inline_data": {"mime_type": image.media_type, "data": HostedHttp::image_bytes(image)?}}),
                ),
            }
        }
        let role = match turn.role {
            Role::User => "user",
            Role::Assistant => "model",
        };
        contents.push(json!({"role": role, "parts": parts}));
    }
    let mut generation = json!({"temperature": request.temperature, "maxOutputTokens": request.max_tokens});
    if let Some(seed) = request.seed {
        generation["seed"] = json!(seed);
    }
    let mut body = json!({"contents": contents, "generationConfig": generation});
    if !request.system.is_empty() {
        body["systemInstruction"] = json!({"parts": [{"text": request.system}]});
    }
    Ok(body)
}

fn malformed(msg: impl Into<String>) -> ProviderError {
    ProviderError::Fatal(BackendError::MalformedProviderReply(msg.into()))
}

pub fn parse_openai(v: &Value) -> Result<ChatResponse, ProviderError> {
    let choice = v.pointer("/choices/0").ok_or_else(|| malformed("no choices"))?;
    let content = choice.pointer("/message/content").ok_or_else(|| malformed("choice has no message content"))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect(),
        Value::Null => String::new(),
        _ => return Err(malformed("message content is neither text nor parts")),
    };
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("content_filter") => FinishReason::Filtered,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok(ChatResponse { text, finish_reason, usage, ..ChatResponse::stop("") })
}

pub fn parse_gemini(v: &Value) -> Result<ChatResponse, ProviderError> {
    let cand = v.pointer("/candidates/0").ok_or_else(|| malformed("no candidates"))?;
    let parts = cand.pointer("/content/parts").and_then(Value::as_array);
    let text: String = parts
        .map(|ps| ps.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect())
        .unwrap_or_default();
    let finish_reason = match cand.get("finishReason").and_then(Value::as_str) {
        Some("STOP") | None => FinishReason::Stop,
        Some("MAX_TOKENS") => FinishReason::Length,
        Some("SAFETY") | Some("RECITATION") | Some("BLOCKLIST") | Some("PROHIBITED_CONTENT") => FinishReason::Filtered,
        Some(_) => FinishReason::Error,
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usageMetadata/promptTokenCount").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usageMetadata/candidatesTokenCount").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok(ChatResponse { text, finish_reason, usage, ..ChatResponse::stop("") })
}

/// Map an HTTP status to the retry classification.
pub fn classify_status(status: u16, body: &str) -> ProviderError {
    let message: String = body.chars().take(300).collect();
    match status {
        408 | 429 | 500..=599 => ProviderError::Transient(format!("HTTP {status}: {message}")),
        401 | 403 => ProviderError::Fatal(BackendError::Auth { status, message }),
        _ => ProviderError::Fatal(BackendError::Rejected { status, message }),
    }
}

impl Provider for HostedHttp {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            ProviderError::Fatal(BackendError::Unavailable(format!(
                "environment variable {} is not set",
                self.api_key_env
            )))
        })?;
        let body = self.body(request)?;
        let builder = self.client.post(&self.endpoint).json(&body);
        let builder = match self.dialect {
            Dialect::OpenaiChat => builder.bearer_auth(&key),
            Dialect::Gemini => builder.header("x-goog-api-key", &key),
        };
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Transient(e.without_url().to_string())
            } else {
                ProviderError::Fatal(BackendError::Unavailable(e.without_url().to_string()))
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| ProviderError::Transient(e.without_url().to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| malformed(format!("body is not JSON: {e}")))?;
        match self.dialect {
            Dialect::OpenaiChat => parse_openai(&v),
            Dialect::Gemini => parse_gemini(&v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use m3cot_core::chat::{GenerationConfig, Turn};

    fn request() -> ChatRequest {
        let mut r = ChatRequest::single(
            &GenerationConfig::default(),
            "sys",
            vec![ContentPart::image(ImageRef::inline("AAEC", "image/png")), ContentPart::text("q")],
        );
        r.turns.push(Turn::assistant("a"));
        r.turns.push(Turn::user(vec![ContentPart::image(ImageRef::uri("https://x/i.jpg", "image/jpeg"))]));
        r
    }

    #[test]
    fn openai_shape() {
        let b = openai_body(&request()).unwrap();
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"][0]["image_url"]["url"], "data:image/png;base64,AAEC");
        assert_eq!(b["messages"][2], json!({"role": "assistant", "content": "a"}));
        assert_eq!(b["messages"][3]["content"][0]["image_url"]["url"], "https://x/i.jpg");
        assert_eq!(b["seed"], 0);
    }

    #[test]
    fn gemini_shape() {
        let b = gemini_body(&request()).unwrap();
        assert_eq!(b["systemInstruction"]["parts"][0]["text"], "sys");
        assert_eq!(b["contents"][0]["parts"][0]["inline_data"]["data"], "AAEC");
        assert_eq!(b["contents"][1]["role"], "model");
        assert_eq!(b["contents"][2]["parts"][0]["file_data"]["file_uri"], "https://x/i.jpg");
        assert_eq!(b["generationConfig"]["maxOutputTokens"], 1024);
    }

    #[test]
    fn reply_parsing() {
        let r = parse_openai(&json!({"choices":[{"message":{"content":"B)"},"finish_reason":"length"}],
            "usage":{"prompt_tokens":3,"completion_tokens":1}}))
        .unwrap();
        assert_eq!((r.text.as_str(), r.finish_reason, r.usage.prompt_tokens), ("B)", FinishReason::Length, 3));
        let g = parse_gemini(&json!({"candidates":[{"content":{"parts":[{"text":"C"},{"text":")"}]},
            "finishReason":"STOP"}]}))
        .unwrap();
        assert_eq!(g.text, "C)");
        assert!(parse_openai(&json!({"id": 1})).is_err());
    }

    #[test]
    fn status_classes() {
        for s in [408, 429, 500, 503] {
            assert!(matches!(classify_status(s, ""), ProviderError::Transient(_)), "{s}");
        }
        assert!(matches!(classify_status(401, ""), ProviderError::Fatal(BackendError::Auth { .. })));
        assert!(matches!(classify_status(403, ""), ProviderError::Fatal(BackendError::Auth { .. })));
        assert!(matches!(classify_status(400, ""), ProviderError::Fatal(BackendError::Rejected { .. })));
    }
}
