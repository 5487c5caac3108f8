//! Comparison methods (Default, DDCoT, CoCoT, CCoT) and the single dispatch
//! point used by the benchmark runner, M3CoT included.
//!
//! The baseline templates carry no image placeholders; both images are sent
//! ahead of the rendered text, ego first.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::answer::{extract_choice_with_options, ChoiceLetter};
use crate::bench::{BenchmarkItem, MethodId};
use crate::bindings;
use crate::chat::ContentPart;
use crate::m3cot::{run_m3cot, AgentId, DecidedBy, IterationState, M3CoTConfig};
use crate::prompt::{keys, Bindings, TemplateKey};
use crate::scene_graph::{extract, AgentTag, ExtractionOutcome, GraphOrigin};
use crate::trace::{CallRecord, PromptContext, StepError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M3CoTSummary {
    pub decided_by: DecidedBy,
    pub states: Vec<IterationState>,
}

/// Everything one method produced for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRunRecord {
    pub method: MethodId,
    pub item_id: String,
    pub calls: Vec<CallRecord>,
    pub final_answer: Option<ChoiceLetter>,
    pub final_text: String,
    pub call_count: u32,
    #[serde(default)]
    pub flags: BTreeSet<String>,
    /// CCoT's intermediate graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<ExtractionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m3cot: Option<M3CoTSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodFailure {
    pub method: MethodId,
    pub item_id: String,
    pub error: StepError,
    pub agent: Option<AgentId>,
    pub calls: Vec<CallRecord>,
    pub states: Vec<IterationState>,
}

impl core::fmt::Display for MethodFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} on item {}: ", self.method.cli_name(), self.item_id)?;
        if let Some(a) = self.agent {
            write!(f, "agent {a}: ")?;
        }
        write!(f, "{}", self.error)
    }
}

pub type MethodResult = Result<MethodRunRecord, MethodFailure>;

/// Calls each method issues per item; M3CoT is the worst case.
pub fn call_budget(method: MethodId, m3cot: &M3CoTConfig) -> u32 {
    match method {
        MethodId::Default | MethodId::CoCoT => 1,
        MethodId::DDCoT | MethodId::CCoT => 2,
        MethodId::M3CoT => 5 + 3 + 6 * m3cot.max_iterations,
    }
}

struct Steps<'c, 'a> {
    ctx: &'c PromptContext<'a>,
    item: &'c BenchmarkItem,
    method: MethodId,
    calls: Vec<CallRecord>,
}

impl Steps<'_, '_> {
    fn fail(self, error: StepError) -> MethodFailure {
        MethodFailure {
            method: self.method,
            item_id: self.item.id.clone(),
            error,
            agent: None,
            calls: self.calls,
            states: Vec::new(),
        }
    }

    /// Images, then the rendered text of `key`.
    fn call(&mut self, label: &str, key: &TemplateKey, bindings: &Bindings) -> Result<String, StepError> {
        let text = self.ctx.catalog.render_text(key, bindings)?;
        let parts = vec![
            ContentPart::image(self.item.ego_image.clone()),
            ContentPart::image(self.item.exo_image.clone()),
            ContentPart::text(text),
        ];
        let request = self.ctx.request_from_parts(parts)?;
        self.ctx.call(label, request, &mut self.calls)
    }

    fn finish(self, final_text: String, graph: Option<ExtractionOutcome>) -> MethodRunRecord {
        let final_answer = extract_choice_with_options(&final_text, &self.item.options);
        MethodRunRecord {
            method: self.method,
            item_id: self.item.id.clone(),
            call_count: self.calls.len() as u32,
            calls: self.calls,
            final_answer,
            final_text,
            flags: BTreeSet::new(),
            graph,
            m3cot: None,
        }
    }
}

fn steps<'c, 'a>(ctx: &'c PromptContext<'a>, item: &'c BenchmarkItem, method: MethodId) -> Steps<'c, 'a> {
    Steps { ctx, item, method, calls: Vec::new() }
}

pub fn run_default(ctx: &PromptContext<'_>, item: &BenchmarkItem) -> MethodResult {
    let mut s = steps(ctx, item, MethodId::Default);
    let result = (|| {
        let question = crate::prompt::question_with_options(&item.question, &item.options);
        let request = s.ctx.request(
            &keys::default_question(),
            &bindings! { EgoImage => &item.ego_image, ExoImage => &item.exo_image, Question => question },
        )?;
        s.ctx.call("default/question", request, &mut s.calls)
    })();
    match result {
        Ok(text) => Ok(s.finish(text, None)),
        Err(e) => Err(s.fail(e)),
    }
}

pub fn run_cocot(ctx: &PromptContext<'_>, item: &BenchmarkItem) -> MethodResult {
    let mut s = steps(ctx, item, MethodId::CoCoT);
    let result = ctx
        .question_prompt(item)
        .map_err(StepError::from)
        .and_then(|qp| s.call("cocot/question", &keys::cocot_question(), &bindings! { QuestionPrompt => qp }));
    match result {
        Ok(text) => Ok(s.finish(text, None)),
        Err(e) => Err(s.fail(e)),
    }
}

pub fn run_ddcot(ctx: &PromptContext<'_>, item: &BenchmarkItem) -> MethodResult {
    let mut s = steps(ctx, item, MethodId::DDCoT);
    let result = (|| {
        let qp = ctx.question_prompt(item)?;
        let context = s.call("ddcot/decompose", &keys::ddcot_decompose(), &bindings! { QuestionPrompt => qp.clone() })?;
        s.call(
            "ddcot/answer",
            &keys::ddcot_answer(),
            &bindings! { AssistantResponse => context, QuestionPrompt => qp },
        )
    })();
    match result {
        Ok(text) => Ok(s.finish(text, None)),
        Err(e) => Err(s.fail(e)),
    }
}

pub fn run_ccot(ctx: &PromptContext<'_>, item: &BenchmarkItem) -> MethodResult {
    let mut s = steps(ctx, item, MethodId::CCoT);
    let result = (|| {
        let qp = ctx.question_prompt(item)?;
        let raw = s.call("ccot/sg_generate", &keys::ccot_generate(), &bindings! { QuestionPrompt => qp.clone() })?;
        let graph = extract(&raw, GraphOrigin::Joint, AgentTag::F1, 0);
        let text = s.call(
            "ccot/answer",
            &keys::ccot_answer(),
            &bindings! { AssistantResponse => raw.clone(), QuestionPrompt => qp },
        )?;
        Ok((text, graph))
    })();
    match result {
        Ok((text, graph)) => Ok(s.finish(text, Some(graph))),
        Err(e) => Err(s.fail(e)),
    }
}

pub fn run_m3cot_method(ctx: &PromptContext<'_>, item: &BenchmarkItem, config: &M3CoTConfig) -> MethodResult {
    match run_m3cot(ctx, item, config) {
        Ok(r) => {
            let final_text = r.final_answer.to_string();
            Ok(MethodRunRecord {
                method: MethodId::M3CoT,
                item_id: item.id.clone(),
                calls: r.calls,
                final_answer: Some(r.final_answer),
                final_text,
                call_count: r.call_count,
                flags: r.flags,
                graph: None,
                m3cot: Some(M3CoTSummary { decided_by: r.decided_by, states: r.states }),
            })
        }
        Err(f) => Err(MethodFailure {
            method: MethodId::M3CoT,
            item_id: item.id.clone(),
            error: f.error,
            agent: f.agent,
            calls: f.calls,
            states: f.states,
        }),
    }
}

/// Run any method on one item.
pub fn run_method(ctx: &PromptContext<'_>, item: &BenchmarkItem, method: MethodId, m3cot: &M3CoTConfig) -> MethodResult {
    match method {
        MethodId::Default => run_default(ctx, item),
        MethodId::DDCoT => run_ddcot(ctx, item),
        MethodId::CoCoT => run_cocot(ctx, item),
        MethodId::CCoT => run_ccot(ctx, item),
        MethodId::M3CoT => run_m3cot_method(ctx, item, m3cot),
    }
}
