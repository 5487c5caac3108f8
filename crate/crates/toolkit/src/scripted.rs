//! Deterministic scripted backend for tests and desk-scale runs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use m3cot_core::chat::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use serde::{Deserialize, Serialize};

use crate::gateway::{Provider, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Match {
    Any,
    ContainsText(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Match,
    pub reply: String,
}

impl ScriptRule {
    pub fn any(reply: impl Into<String>) -> Self {
        Self { matcher: Match::Any, reply: reply.into() }
    }

    pub fn contains(text: impl Into<String>, reply: impl Into<String>) -> Self {
        Self { matcher: Match::ContainsText(text.into()), reply: reply.into() }
    }
}

/// Replies with the first rule matching the last user turn's text.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    calls: AtomicU64,
    fail_first: u64,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules, ..Default::default() }
    }

    pub fn any(reply: impl Into<String>) -> Self {
        Self::new(vec![ScriptRule::any(reply)])
    }

    /// Fail the first `n` calls with a transient error.
    pub fn fail_first(mut self, n: u64) -> Self {
        self.fail_first = n;
        self
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn reply_for(&self, request: &ChatRequest) -> Option<&str> {
        let text = request.last_user_text();
        self.rules
            .iter()
            .find(|r| match &r.matcher {
                Match::Any => true,
                Match::ContainsText(needle) => text.contains(needle.as_str()),
            })
            .map(|r| r.reply.as_str())
    }
}

impl Provider for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        if n < self.fail_first {
            return Err(ProviderError::Transient(format!("scripted failure {}", n + 1)));
        }
        self.reply_for(request)
            .map(ChatResponse::stop)
            .ok_or(ProviderError::Fatal(BackendError::NoScriptMatch))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.send(request).map_err(|e| match e {
            ProviderError::Transient(msg) => BackendError::TransientExhausted { attempts: 1, last_error: msg },
            ProviderError::Fatal(e) => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use m3cot_core::chat::{ContentPart, GenerationConfig};

    fn request(text: &str) -> ChatRequest {
        ChatRequest::single(&GenerationConfig::default(), "", vec![ContentPart::text(text)])
    }

    #[test]
    fn first_match_wins_and_counts() {
        let s = ScriptedBackend::new(vec![
            ScriptRule::contains("scene graph", "{\"objects\":[]}"),
            ScriptRule::any("A)"),
        ]);
        assert_eq!(s.complete(&request("make a scene graph")).unwrap().text, "{\"objects\":[]}");
        assert_eq!(s.complete(&request("answer")).unwrap().text, "A)");
        for _ in 0..5 {
            s.complete(&request("x")).unwrap();
        }
        assert_eq!(s.call_count(), 7);
        assert_eq!(s.requests().len(), 7);
    }

    #[test]
    fn no_match() {
        let s = ScriptedBackend::new(vec![ScriptRule::contains("zzz", "A)")]);
        assert_eq!(s.complete(&request("q")), Err(BackendError::NoScriptMatch));
    }
}
