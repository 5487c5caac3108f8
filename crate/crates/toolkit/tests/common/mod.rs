//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use m3cot_core::bench::{BenchmarkItem, Category, Perspective};
use m3cot_core::chat::{BackendError, ChatBackend, ChatRequest, ChatResponse, ImageRef};
use m3cot_toolkit::gateway::{Provider, ProviderError};

/// Base64 of the bytes `EGO` and `EXO`, so a mock can tell the views apart.
pub const EGO_B64: &str = "RUdP";
pub const EXO_B64: &str = "RVhP";

/// `n` valid items cycling through the eight cells; the correct letter
/// cycles A-D.
pub fn items(n: usize) -> Vec<BenchmarkItem> {
    (0..n)
        .map(|i| BenchmarkItem {
            id: format!("q{i:03}"),
            category: Category::ALL[i % 4],
            question_perspective: Perspective::ALL[(i / 4) % 2],
            ego_image: ImageRef::inline(EGO_B64, "image/png"),
            exo_image: ImageRef::inline(EXO_B64, "image/png"),
            question: format!("What is happening in item q{i:03}?"),
            options: vec!["cutting".into(), "stirring".into(), "pouring".into(), "washing".into()],
            answer_index: i % 4,
            required_views: None,
            source_take: Some(format!("take{}", i / 8)),
        })
        .collect()
}

/// Item id quoted in a request's question text.
pub fn item_id_in(text: &str) -> Option<String> {
    let at = text.find("item q")?;
    Some(text[at + 5..].chars().take(4).collect())
}

pub fn graph_json(token: &str) -> String {
    format!(r#"{{"objects":[{{"name":"{token}","attributes":{{"state":"visible"}}}}],"relationships":[]}}"#)
}

/// Token naming agent `a` (0-2) at iteration `t`.
pub fn node(a: usize, t: u32) -> String {
    format!("nodeF{}i{t}x", a + 1)
}

/// Every `nodeF<a>i<t>x` token in `text`, in order of appearance.
pub fn nodes_in(text: &str) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(at) = rest.find("nodeF") {
        let tail = &rest[at + 5..];
        let agent = tail.chars().next().and_then(|c| c.to_digit(10));
        let iter: String = tail.chars().skip(2).take_while(char::is_ascii_digit).collect();
        if let (Some(a), Ok(t)) = (agent, iter.parse::<u32>()) {
            if tail[1..].starts_with('i') && (1..=3).contains(&a) {
                out.push((a as usize - 1, t));
            }
        }
        rest = &rest[at + 5..];
    }
    out
}

/// Answer text for (item id, agent, iteration).
pub type AnswerFn = dyn Fn(&str, usize, u32) -> String + Send + Sync;

/// A mock that understands the M3CoT prompts: it emits graphs tagged with
/// agent and iteration and answers through `answer`. Baseline and forge
/// prompts fall through to `fallback`.
pub struct AgentMock {
    pub answer: Box<AnswerFn>,
    pub fallback: String,
    pub calls: AtomicU64,
    pub requests: Mutex<Vec<ChatRequest>>,
}

impl AgentMock {
    pub fn new(answer: impl Fn(&str, usize, u32) -> String + Send + Sync + 'static) -> Self {
        Self { answer: Box::new(answer), fallback: "B)".into(), calls: AtomicU64::new(0), requests: Mutex::new(Vec::new()) }
    }

    /// Fixed letters per iteration: `table[t][agent]`; the last row repeats.
    pub fn table(table: Vec<[char; 3]>) -> Self {
        Self::new(move |_, a, t| {
            let row = table[(t as usize).min(table.len() - 1)];
            format!("{})", row[a])
        })
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reply(&self, request: &ChatRequest) -> String {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap().push(request.clone());
        let text = request.last_user_text();
        let id = item_id_in(&text).unwrap_or_default();
        let first_image = request.images().next().map(|i| i.value.clone()).unwrap_or_default();
        let found = nodes_in(&text);
        if text.contains("generate a unified scene graph") {
            return graph_json(&node(0, 0));
        }
        if text.contains("generate a scene graph in JSON format that includes") && !text.contains("provided images") {
            let agent = if first_image == EGO_B64 { "F2" } else { "F3" };
            return graph_json(&format!("view{agent}x"));
        }
        if text.contains("scene graph generated from the previous view") {
            let agent = if text.contains("viewF2x") { 1 } else { 2 };
            return graph_json(&node(agent, 0));
        }
        if text.contains("Below are different scene graphs") {
            let t = found.first().map_or(0, |n| n.1);
            let present: Vec<usize> = found.iter().map(|n| n.0).collect();
            let me = (0..3).find(|a| !present.contains(a)).unwrap_or(0);
            return graph_json(&node(me, t + 1));
        }
        if text.contains("scene graph as context and answer") {
            if let Some(&(a, t)) = found.first() {
                return (self.answer)(&id, a, t);
            }
        }
        self.fallback.clone()
    }
}

impl ChatBackend for AgentMock {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse::stop(self.reply(request)))
    }
}

impl Provider for AgentMock {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        Ok(ChatResponse::stop(self.reply(request)))
    }
}

/// Correct letters by item id.
pub fn answer_key(items: &[BenchmarkItem]) -> BTreeMap<String, char> {
    items.iter().map(|i| (i.id.clone(), i.answer_letter().as_char())).collect()
}
