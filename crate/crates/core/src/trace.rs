//! Shared call plumbing: the per-run prompt context and the call log every
//! method and pipeline stage appends to.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkItem;
use crate::bindings;
use crate::chat::{BackendError, ChatBackend, ChatRequest, ContentPart, GenerationConfig};
use crate::prompt::{keys, question_with_options, Bindings, Catalog, PromptError, TemplateKey};

/// One backend call as seen by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// Step label, e.g. `F2/sg_refine_view/0` or `ddcot/answer`.
    pub label: String,
    pub request: ChatRequest,
    pub response_text: String,
    #[serde(default)]
    pub from_cache: bool,
    #[serde(default)]
    pub request_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{label}: {error}")]
    Backend { label: String, error: BackendError },
}

/// Everything a pipeline step needs to build and send requests.
#[derive(Clone, Copy)]
pub struct PromptContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub catalog: &'a Catalog,
    pub gen: &'a GenerationConfig,
    /// Send the catalog's system prompt with every request.
    pub system_prompt: bool,
}

impl<'a> PromptContext<'a> {
    pub fn new(backend: &'a dyn ChatBackend, catalog: &'a Catalog, gen: &'a GenerationConfig) -> Self {
        Self { backend, catalog, gen, system_prompt: true }
    }

    pub fn without_system_prompt(mut self) -> Self {
        self.system_prompt = false;
        self
    }

    pub fn system_text(&self) -> Result<String, PromptError> {
        if !self.system_prompt {
            return Ok(String::new());
        }
        self.catalog.render_text(&keys::system(), &Bindings::new())
    }

    /// The rendered question-prompt text for a benchmark item.
    pub fn question_prompt(&self, item: &BenchmarkItem) -> Result<String, PromptError> {
        let question = question_with_options(&item.question, &item.options);
        self.catalog.render_text(&keys::question_prompt(), &bindings! { Question => question })
    }

    /// A single-turn request from a catalog template.
    pub fn request(&self, key: &TemplateKey, bindings: &Bindings) -> Result<ChatRequest, PromptError> {
        let parts = self.catalog.render(key, bindings)?;
        self.request_from_parts(parts)
    }

    pub fn request_from_parts(&self, parts: Vec<ContentPart>) -> Result<ChatRequest, PromptError> {
        Ok(ChatRequest::single(self.gen, self.system_text()?, parts))
    }

    /// Send `request`, append it to `log`, and return the reply text.
    pub fn call(&self, label: &str, request: ChatRequest, log: &mut Vec<CallRecord>) -> Result<String, StepError> {
        let response = self
            .backend
            .complete(&request)
            .map_err(|error| StepError::Backend { label: label.to_string(), error })?;
        let text = response.text.clone();
        log.push(CallRecord {
            label: label.to_string(),
            request,
            response_text: response.text,
            from_cache: response.from_cache,
            request_digest: response.request_digest,
        });
        Ok(text)
    }
}
