//! Core logic for multi-view (egocentric + exocentric) question answering with
//! large vision-language models.
//!
//! Everything here is allocation-only and free of IO: request/response types,
//! the prompt catalog and renderer, scene-graph extraction, answer extraction,
//! the three-agent scene-graph reasoning engine ([`m3cot`]), the CoT baselines,
//! benchmark scoring, the question-construction pipeline ([`forge`]) and the
//! curation state machine. Model access goes through the [`chat::ChatBackend`]
//! trait; the `m3cot-toolkit` crate supplies HTTP, caching, files and the CLI.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod answer;
pub mod baselines;
pub mod bench;
pub mod chat;
pub mod curation;
pub mod forge;
pub mod m3cot;
pub mod prompt;
pub mod scene_graph;
pub mod trace;

pub use answer::{extract_choice, ChoiceLetter};
pub use bench::{BenchmarkItem, Category, MethodId, Perspective};
pub use chat::{BackendError, ChatBackend, ChatRequest, ChatResponse, ContentPart, ImageRef};
pub use prompt::{Catalog, TemplateKey};
pub use trace::PromptContext;
