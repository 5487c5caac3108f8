//! Benchmark execution: fan items out over a gateway, score them, and write
//! the run directory.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use m3cot_core::answer::ChoiceLetter;
use m3cot_core::baselines::{run_method, MethodFailure, MethodRunRecord};
use m3cot_core::bench::{aggregate, render_report, Aggregate, BenchmarkItem, EvalRecord, MethodId, ReportFormat};
use m3cot_core::chat::{BackendError, ChatBackend, ChatRequest, ChatResponse, ContentPart, GenerationConfig, ImageSource};
use m3cot_core::m3cot::{preview_initial_requests, AgentId, DecidedBy, IterationState, M3CoTConfig};
use m3cot_core::prompt::Catalog;
use m3cot_core::scene_graph::ExtractionOutcome;
use m3cot_core::trace::{CallRecord, PromptContext, StepError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{to_jsonl, write_dataset};
use crate::gateway::{Gateway, GatewayStats};
use crate::util::{fan_out, file_safe, write_atomic};

/// What to run; everything else comes from the gateway and catalog.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub method: MethodId,
    pub runs: u32,
    pub m3cot: M3CoTConfig,
    /// Base generation settings; the seed advances by the run index.
    pub generation: GenerationConfig,
    pub workers: usize,
    pub system_prompt: bool,
}

impl RunSpec {
    pub fn new(method: MethodId, runs: u32) -> Self {
        Self {
            method,
            runs,
            m3cot: M3CoTConfig::default(),
            generation: GenerationConfig::default(),
            workers: 4,
            system_prompt: true,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            method: cfg.method,
            runs: cfg.runs,
            m3cot: cfg.m3cot.clone(),
            generation: cfg.generation(0),
            workers: cfg.max_in_flight,
            system_prompt: cfg.system_prompt,
        }
    }

    pub fn generation_for(&self, run_index: u32) -> GenerationConfig {
        GenerationConfig { seed: self.generation.seed.map(|s| s.wrapping_add(run_index as u64)), ..self.generation.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub value: String,
    pub media_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCall {
    pub label: String,
    pub request_digest: Option<String>,
    pub from_cache: bool,
    pub images: Vec<ImageInfo>,
    pub request: ChatRequest,
    pub response_text: String,
}

/// Everything one method did on one item in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub item_id: String,
    pub method: MethodId,
    pub run_index: u32,
    pub final_answer: Option<ChoiceLetter>,
    pub final_text: Option<String>,
    pub call_count: u32,
    pub flags: BTreeSet<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_agent: Option<AgentId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decided_by: Option<DecidedBy>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub m3cot_states: Vec<IterationState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<ExtractionOutcome>,
    pub calls: Vec<TraceCall>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Sorted by (item_id, run_index).
    pub records: Vec<EvalRecord>,
    pub traces: Vec<ItemTrace>,
    pub stats: GatewayStats,
}

impl RunOutput {
    pub fn error_count(&self) -> usize {
        self.records.iter().filter(|r| r.flags.contains(FLAG_ERROR)).count()
    }
}

pub const FLAG_ERROR: &str = "error";
pub const FLAG_UNPARSED: &str = "unparsed";

/// Stable short name of a backend error, used in record flags.
pub fn error_kind(e: &StepError) -> &'static str {
    match e {
        StepError::Prompt(_) => "prompt",
        StepError::Backend { error, .. } => match error {
            BackendError::InvalidRequest(_) => "invalid_request",
            BackendError::Auth { .. } => "auth",
            BackendError::Rejected { .. } => "rejected",
            BackendError::BudgetExceeded { .. } => "budget_exceeded",
            BackendError::TransientExhausted { .. } => "transient_exhausted",
            BackendError::MalformedProviderReply(_) => "malformed_reply",
            BackendError::NoScriptMatch => "no_script_match",
            BackendError::ImageUnreadable(_) => "image_unreadable",
            BackendError::Unavailable(_) => "unavailable",
        },
    }
}

#[derive(Default)]
struct DimensionMemo(Mutex<HashMap<String, Option<(usize, usize)>>>);

impl DimensionMemo {
    fn info(&self, image: &m3cot_core::chat::ImageRef) -> ImageInfo {
        let dims = match image.source {
            ImageSource::LocalPath => {
                let cached = self.0.lock().unwrap().get(&image.value).copied();
                cached.unwrap_or_else(|| {
                    let d = imagesize::size(&image.value).ok().map(|s| (s.width, s.height));
                    self.0.lock().unwrap().insert(image.value.clone(), d);
                    d
                })
            }
            ImageSource::InlineBase64 => image
                .inline_bytes()
                .and_then(|b| imagesize::blob_size(&b).ok())
                .map(|s| (s.width, s.height)),
            ImageSource::Uri => None,
        };
        let value = match image.source {
            ImageSource::InlineBase64 => format!("(inline, {} base64 chars)", image.value.len()),
            _ => image.value.clone(),
        };
        ImageInfo {
            value,
            media_type: image.media_type.clone(),
            width: dims.map(|d| d.0),
            height: dims.map(|d| d.1),
        }
    }

    fn calls(&self, calls: Vec<CallRecord>) -> Vec<TraceCall> {
        calls
            .into_iter()
            .map(|c| TraceCall {
                images: c.request.images().map(|i| self.info(i)).collect(),
                label: c.label,
                request_digest: c.request_digest,
                from_cache: c.from_cache,
                request: c.request,
                response_text: c.response_text,
            })
            .collect()
    }
}

fn outcome(
    item: &BenchmarkItem,
    run_index: u32,
    result: Result<MethodRunRecord, MethodFailure>,
    dims: &DimensionMemo,
) -> (EvalRecord, ItemTrace) {
    match result {
        Ok(r) => {
            let mut record = EvalRecord::score(item, r.method, run_index, r.final_answer, r.call_count);
            record.flags = r.flags.clone();
            if r.final_answer.is_none() {
                record.flags.insert(FLAG_UNPARSED.to_string());
            }
            let (decided_by, states) = match r.m3cot {
                Some(s) => (Some(s.decided_by), s.states),
                None => (None, Vec::new()),
            };
            let trace = ItemTrace {
                item_id: item.id.clone(),
                method: r.method,
                run_index,
                final_answer: r.final_answer,
                final_text: Some(r.final_text),
                call_count: r.call_count,
                flags: record.flags.clone(),
                error: None,
                error_agent: None,
                decided_by,
                m3cot_states: states,
                graph: r.graph,
                calls: dims.calls(r.calls),
            };
            (record, trace)
        }
        Err(f) => {
            let mut record = EvalRecord::score(item, f.method, run_index, None, f.calls.len() as u32);
            record.flags.insert(FLAG_ERROR.to_string());
            record.flags.insert(format!("error:{}", error_kind(&f.error)));
            let trace = ItemTrace {
                item_id: item.id.clone(),
                method: f.method,
                run_index,
                final_answer: None,
                final_text: None,
                call_count: f.calls.len() as u32,
                flags: record.flags.clone(),
                error: Some(f.to_string()),
                error_agent: f.agent,
                decided_by: None,
                m3cot_states: f.states,
                graph: None,
                calls: dims.calls(f.calls),
            };
            (record, trace)
        }
    }
}

/// Run `spec.method` over every (item, run) pair. Each run reads and writes
/// its own cache namespace. Backend failures become flagged records; no pair
/// is dropped.
pub fn run_benchmark(items: &[BenchmarkItem], spec: &RunSpec, gateway: &Gateway, catalog: &Catalog) -> RunOutput {
    let runs: Vec<(Gateway, GenerationConfig)> =
        (0..spec.runs).map(|k| (gateway.namespaced(format!("run-{k}")), spec.generation_for(k))).collect();
    let pairs: Vec<(u32, usize)> = (0..spec.runs).flat_map(|k| (0..items.len()).map(move |i| (k, i))).collect();
    let dims = DimensionMemo::default();
    let results = fan_out(&pairs, spec.workers, |_, &(k, i)| {
        let (gw, gen) = &runs[k as usize];
        let mut ctx = PromptContext::new(gw, catalog, gen);
        if !spec.system_prompt {
            ctx = ctx.without_system_prompt();
        }
        let item = &items[i];
        outcome(item, k, run_method(&ctx, item, spec.method, &spec.m3cot), &dims)
    });
    let (mut records, mut traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    records.sort_by(|a: &EvalRecord, b| (&a.item_id, a.run_index).cmp(&(&b.item_id, b.run_index)));
    traces.sort_by(|a: &ItemTrace, b| (&a.item_id, a.run_index).cmp(&(&b.item_id, b.run_index)));
    RunOutput { records, traces, stats: gateway.stats() }
}

/// Records a backend without answering, for `--dry-run`.
#[derive(Default)]
pub struct CaptureBackend(pub Mutex<Vec<ChatRequest>>);

impl ChatBackend for CaptureBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.0.lock().unwrap().push(request.clone());
        Err(BackendError::Unavailable("dry run".into()))
    }
}

/// The prompts a method would send first for `item`, without any backend
/// call: the five initial-phase prompts for M3CoT, the first request for
/// the baselines (later requests depend on earlier replies).
pub fn dry_run_prompts(ctx: &PromptContext<'_>, item: &BenchmarkItem, method: MethodId) -> Result<Vec<(String, ChatRequest)>, StepError> {
    if method == MethodId::M3CoT {
        return preview_initial_requests(ctx, item);
    }
    let capture = CaptureBackend::default();
    let probe = PromptContext { backend: &capture, ..*ctx };
    match run_method(&probe, item, method, &M3CoTConfig::default()) {
        Err(f) if matches!(f.error, StepError::Prompt(_)) => return Err(f.error),
        _ => {}
    }
    let label = match method {
        MethodId::Default => "default/question",
        MethodId::CoCoT => "cocot/question",
        MethodId::DDCoT => "ddcot/decompose",
        MethodId::CCoT => "ccot/sg_generate",
        MethodId::M3CoT => unreachable!(),
    };
    Ok(capture.0.into_inner().unwrap().into_iter().map(|r| (label.to_string(), r)).collect())
}

/// Human-readable rendering of a request.
pub fn render_request(request: &ChatRequest) -> String {
    let mut out = String::new();
    if !request.system.is_empty() {
        out.push_str("[system]\n");
        out.push_str(&request.system);
        out.push('\n');
    }
    for turn in &request.turns {
        out.push_str(&format!("[{}]\n", turn.role));
        for part in &turn.parts {
            match part {
                ContentPart::Text { text } => {
                    out.push_str(text);
                    out.push('\n');
                }
                ContentPart::Image { image } => out.push_str(&format!("<image {} {}>\n", image.media_type, image.value)),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub method: MethodId,
    pub items: usize,
    pub runs: u32,
    pub records: usize,
    pub errors: usize,
    pub gateway: GatewayStats,
}

/// A fresh `run-<timestamp>-<hash>` directory under `out`, suffixed when
/// the name is taken.
pub fn create_run_dir(out: &Path, config_digest: &str) -> io::Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    fs::create_dir_all(out)?;
    let base = format!("run-{stamp}-{config_digest}");
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";

/// Write records, traces, the items snapshot, the resolved config and the
/// reports. Returns the aggregate when the record grid is complete.
pub fn write_run(
    dir: &Path,
    config_toml: &str,
    items: &[BenchmarkItem],
    image_root: &Path,
    output: &RunOutput,
    method: MethodId,
) -> io::Result<Result<Aggregate, m3cot_core::bench::AggregateError>> {
    write_atomic(&dir.join("config.toml"), config_toml.as_bytes())?;
    write_dataset(&dir.join(ITEMS_FILE), items, image_root)?;
    write_atomic(&dir.join(RECORDS_FILE), to_jsonl(&output.records).as_bytes())?;
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    for t in &output.traces {
        let name = format!("{}.run{}.json", file_safe(&t.item_id), t.run_index);
        let mut bytes = serde_json::to_vec_pretty(t).map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&traces.join(name), &bytes)?;
    }
    let summary = RunSummary {
        method,
        items: items.len(),
        runs: output.records.iter().map(|r| r.run_index + 1).max().unwrap_or(0),
        records: output.records.len(),
        errors: output.error_count(),
        gateway: output.stats,
    };
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary).map_err(io::Error::other)?)?;
    let agg = aggregate(&output.records, items);
    if let Ok(agg) = &agg {
        write_atomic(&dir.join("aggregate.json"), render_report(agg, ReportFormat::Json).as_bytes())?;
        write_atomic(&dir.join("report.md"), render_report(agg, ReportFormat::MarkdownTable).as_bytes())?;
        write_atomic(&dir.join("report.csv"), render_report(agg, ReportFormat::Csv).as_bytes())?;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scripted::ScriptedBackend;
    use crate::templates::load_catalog;
    use m3cot_core::bench::{Category, Perspective};
    use m3cot_core::chat::ImageRef;

    fn items(n: usize) -> Vec<BenchmarkItem> {
        (0..n)
            .map(|i| BenchmarkItem {
                id: format!("q{i:02}"),
                category: Category::ALL[i % 4],
                question_perspective: Perspective::ALL[(i / 4) % 2],
                ego_image: ImageRef::inline("AAEC", "image/png"),
                exo_image: ImageRef::inline("AAED", "image/png"),
                question: format!("Question {i}?"),
                options: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                answer_index: 1,
                required_views: None,
                source_take: None,
            })
            .collect()
    }

    #[test]
    fn grid_is_complete_and_sorted() {
        let catalog = load_catalog(None).unwrap();
        let gw = Gateway::plain(ScriptedBackend::any("B)"));
        let out = run_benchmark(&items(4), &RunSpec::new(MethodId::Default, 2), &gw, &catalog);
        assert_eq!(out.records.len(), 8);
        assert!(out.records.windows(2).all(|w| (&w[0].item_id, w[0].run_index) < (&w[1].item_id, w[1].run_index)));
        assert!(out.records.iter().all(|r| r.correct));
    }

    #[test]
    fn failures_become_flags() {
        let catalog = load_catalog(None).unwrap();
        let gw = Gateway::plain(ScriptedBackend::new(vec![]));
        let out = run_benchmark(&items(2), &RunSpec::new(MethodId::DDCoT, 1), &gw, &catalog);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.error_count(), 2);
        assert!(out.records[0].flags.contains("error:no_script_match"));
        assert!(out.traces[0].error.is_some());
    }

    #[test]
    fn dry_run_counts() {
        let catalog = load_catalog(None).unwrap();
        let gen = GenerationConfig::default();
        let never = CaptureBackend::default();
        let ctx = PromptContext::new(&never, &catalog, &gen);
        let item = &items(1)[0];
        assert_eq!(dry_run_prompts(&ctx, item, MethodId::M3CoT).unwrap().len(), 5);
        assert_eq!(dry_run_prompts(&ctx, item, MethodId::DDCoT).unwrap().len(), 1);
        assert!(never.0.lock().unwrap().is_empty());
    }
}
