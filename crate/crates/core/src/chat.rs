//! Vendor-neutral multimodal chat exchange.
//!
//! A [`ChatRequest`] is an ordered conversation of text and image parts; it is
//! the only thing any pipeline in this crate ever sends to a model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    LocalPath,
    Uri,
    InlineBase64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub source: ImageSource,
    pub value: String,
    pub media_type: String,
}

impl ImageRef {
    pub fn local(path: impl Into<String>) -> Self {
        let value = path.into();
        let media_type = media_type_for(&value).to_string();
        Self { source: ImageSource::LocalPath, value, media_type }
    }

    pub fn uri(uri: impl Into<String>, media_type: impl Into<String>) -> Self {
        Self { source: ImageSource::Uri, value: uri.into(), media_type: media_type.into() }
    }

    pub fn inline(base64: impl Into<String>, media_type: impl Into<String>) -> Self {
        Self { source: ImageSource::InlineBase64, value: base64.into(), media_type: media_type.into() }
    }

    /// Decoded bytes of an inline image.
    pub fn inline_bytes(&self) -> Option<Vec<u8>> {
        if self.source != ImageSource::InlineBase64 {
            return None;
        }
        base64::engine::general_purpose::STANDARD.decode(self.value.as_bytes()).ok()
    }
}

/// Guess a media type from a file extension; defaults to JPEG.
pub fn media_type_for(path: &str) -> &'static str {
    let lower = path.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match lower.as_str() {
        "png" => "image/png",
        "webp" => "image/webp",
        "gif" => "image/gif",
        "bmp" => "image/bmp",
        _ => "image/jpeg",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { image: ImageRef },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    pub fn image(image: ImageRef) -> Self {
        ContentPart::Image { image }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ContentPart::Text { text } => Some(text),
            ContentPart::Image { .. } => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageRef> {
        match self {
            ContentPart::Image { image } => Some(image),
            ContentPart::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl Turn {
    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self { role: Role::User, parts }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, parts: alloc::vec![ContentPart::text(text)] }
    }

    /// All text parts joined with newlines.
    pub fn joined_text(&self) -> String {
        let mut out = String::new();
        for text in self.parts.iter().filter_map(ContentPart::as_text) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(text);
        }
        out
    }
}

/// Model-side generation settings shared by every call of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { model_id: "mock-lvlm".into(), temperature: 0.0, max_tokens: 1024, seed: Some(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    #[serde(default)]
    pub system: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RequestError {
    #[error("request has no turns")]
    NoTurns,
    #[error("first turn must come from the user")]
    FirstTurnNotUser,
    #[error("turn {0} does not alternate roles")]
    RolesNotAlternating(usize),
    #[error("assistant turn {0} contains an image")]
    AssistantImage(usize),
    #[error("turn {0} has an empty text part")]
    EmptyText(usize),
    #[error("turn {0} has no parts")]
    EmptyTurn(usize),
    #[error("temperature must be finite and non-negative")]
    BadTemperature,
    #[error("max_tokens must be positive")]
    BadMaxTokens,
    #[error("inline image in turn {0} does not decode to bytes")]
    BadInlineImage(usize),
}

impl ChatRequest {
    /// A single-user-turn request.
    pub fn single(gen: &GenerationConfig, system: impl Into<String>, parts: Vec<ContentPart>) -> Self {
        Self {
            model_id: gen.model_id.clone(),
            system: system.into(),
            turns: alloc::vec![Turn::user(parts)],
            temperature: gen.temperature,
            max_tokens: gen.max_tokens,
            seed: gen.seed,
        }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        let first = self.turns.first().ok_or(RequestError::NoTurns)?;
        if first.role != Role::User {
            return Err(RequestError::FirstTurnNotUser);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(RequestError::RolesNotAlternating(i));
            }
            if turn.parts.is_empty() {
                return Err(RequestError::EmptyTurn(i));
            }
            for part in &turn.parts {
                match part {
                    ContentPart::Text { text } if text.trim().is_empty() => {
                        return Err(RequestError::EmptyText(i))
                    }
                    ContentPart::Image { .. } if turn.role == Role::Assistant => {
                        return Err(RequestError::AssistantImage(i))
                    }
                    ContentPart::Image { image } if image.source == ImageSource::InlineBase64 => {
                        if image.inline_bytes().map_or(true, |b| b.is_empty()) {
                            return Err(RequestError::BadInlineImage(i));
                        }
                    }
                    _ => {}
                }
            }
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(RequestError::BadTemperature);
        }
        if self.max_tokens == 0 {
            return Err(RequestError::BadMaxTokens);
        }
        Ok(())
    }

    pub fn last_user_turn(&self) -> Option<&Turn> {
        self.turns.iter().rev().find(|t| t.role == Role::User)
    }

    /// Text of the last user turn, parts joined by newlines.
    pub fn last_user_text(&self) -> String {
        self.last_user_turn().map(Turn::joined_text).unwrap_or_default()
    }

    /// Every image part across all turns, in order.
    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.turns.iter().flat_map(|t| t.parts.iter()).filter_map(ContentPart::as_image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Filtered,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub from_cache: bool,
    /// Content fingerprint of the request that produced this response, when
    /// the serving backend computes one.
    #[serde(default)]
    pub request_digest: Option<String>,
}

impl ChatResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
            latency_ms: 0,
            from_cache: false,
            request_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(RequestError),
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("call ceiling of {ceiling} reached")]
    BudgetExceeded { ceiling: u64 },
    #[error("transient failures persisted after {attempts} attempts: {last_error}")]
    TransientExhausted { attempts: u32, last_error: String },
    #[error("malformed provider reply: {0}")]
    MalformedProviderReply(String),
    #[error("no script rule matched the request")]
    NoScriptMatch,
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

impl From<RequestError> for BackendError {
    fn from(e: RequestError) -> Self {
        BackendError::InvalidRequest(e)
    }
}

/// Anything that can answer a [`ChatRequest`].
pub trait ChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for alloc::boxed::Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for alloc::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn req(turns: Vec<Turn>) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            system: String::new(),
            turns,
            temperature: 0.0,
            max_tokens: 16,
            seed: None,
        }
    }

    #[test]
    fn valid_multi_turn() {
        let r = req(vec![
            Turn::user(vec![ContentPart::text("hi")]),
            Turn::assistant("hello"),
            Turn::user(vec![ContentPart::image(ImageRef::local("a.jpg")), ContentPart::text("q")]),
        ]);
        assert_eq!(r.validate(), Ok(()));
        assert_eq!(r.last_user_text(), "q");
    }

    #[test]
    fn rejects_structural_violations() {
        assert_eq!(req(vec![]).validate(), Err(RequestError::NoTurns));
        assert_eq!(req(vec![Turn::assistant("x")]).validate(), Err(RequestError::FirstTurnNotUser));
        let two_users = req(vec![
            Turn::user(vec![ContentPart::text("a")]),
            Turn::user(vec![ContentPart::text("b")]),
        ]);
        assert_eq!(two_users.validate(), Err(RequestError::RolesNotAlternating(1)));
        let blank = req(vec![Turn::user(vec![ContentPart::text("  \n")])]);
        assert_eq!(blank.validate(), Err(RequestError::EmptyText(0)));
        let assistant_image = req(vec![
            Turn::user(vec![ContentPart::text("a")]),
            Turn { role: Role::Assistant, parts: vec![ContentPart::image(ImageRef::local("x.png"))] },
        ]);
        assert_eq!(assistant_image.validate(), Err(RequestError::AssistantImage(1)));
    }

    #[test]
    fn inline_images_must_decode() {
        let bad = req(vec![Turn::user(vec![ContentPart::image(ImageRef::inline("!!!", "image/png"))])]);
        assert_eq!(bad.validate(), Err(RequestError::BadInlineImage(0)));
        let good = req(vec![Turn::user(vec![ContentPart::image(ImageRef::inline("AAEC", "image/png"))])]);
        assert_eq!(good.validate(), Ok(()));
    }

    #[test]
    fn media_types_from_extension() {
        assert_eq!(ImageRef::local("a/b.PNG").media_type, "image/png");
        assert_eq!(ImageRef::local("frame_003.jpg").media_type, "image/jpeg");
    }
}
