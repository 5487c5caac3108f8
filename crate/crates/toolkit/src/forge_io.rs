//! Drivers for the question-forge stages over JSONL artifacts.
//!
//! Each stage maps a candidate file to the next one. Stages only call the
//! backend for fields that are still empty, so re-running a stage over its
//! own output is cheap, and the response cache makes repeated calls free.

use m3cot_core::chat::GenerationConfig;
use m3cot_core::forge::{
    expand_responses, filter_question, generate_options, generate_single_view_qas, CandidateQA, FramePair,
    OptionStageError, Verdict,
};
use m3cot_core::prompt::Catalog;
use m3cot_core::trace::{CallRecord, PromptContext, StepError};
use serde::Serialize;

use crate::gateway::Gateway;
use crate::util::fan_out;

/// Shared settings for a stage invocation.
pub struct StageEnv<'a> {
    pub gateway: &'a Gateway,
    pub catalog: &'a Catalog,
    pub generation: GenerationConfig,
    pub workers: usize,
}

impl StageEnv<'_> {
    /// Forge prompts go out without the benchmark system prompt.
    fn with_ctx<R>(&self, f: impl FnOnce(&PromptContext<'_>) -> R) -> R {
        let ctx = PromptContext::new(self.gateway, self.catalog, &self.generation).without_system_prompt();
        f(&ctx)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    /// Records that needed backend work.
    pub processed: usize,
    /// Records already complete or not eligible for this stage.
    pub skipped: usize,
    pub calls: usize,
    pub cache_hits: usize,
    pub failures: Vec<StageFailure>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageFailure {
    pub id: String,
    pub error: String,
}

impl StageReport {
    fn new(stage: &str, input: usize) -> Self {
        Self { stage: stage.to_string(), input, ..Default::default() }
    }

    fn count(&mut self, log: &[CallRecord]) {
        self.calls += log.len();
        self.cache_hits += log.iter().filter(|c| c.from_cache).count();
    }
}

/// Step 1 over frame pairs: eight calls per pair.
pub fn run_step1(env: &StageEnv<'_>, pairs: &[FramePair]) -> (Vec<CandidateQA>, StageReport) {
    let mut report = StageReport::new("step1", pairs.len());
    let results = fan_out(pairs, env.workers, |_, pair| {
        let mut log = Vec::new();
        let r = env.with_ctx(|ctx| generate_single_view_qas(ctx, pair, &mut log));
        (r, log)
    });
    let mut candidates = Vec::new();
    for (pair, (result, log)) in pairs.iter().zip(results) {
        report.count(&log);
        report.processed += 1;
        match result {
            Ok(out) => {
                report.diagnostics.extend(out.diagnostics);
                candidates.extend(out.candidates);
            }
            Err(e) => report.failures.push(StageFailure { id: pair.pair_id.clone(), error: e.to_string() }),
        }
    }
    candidates.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    report.output = candidates.len();
    (candidates, report)
}

/// Apply a per-candidate step in parallel, keeping partial progress from
/// failed candidates.
fn map_candidates(
    env: &StageEnv<'_>,
    stage: &str,
    candidates: Vec<CandidateQA>,
    eligible: impl Fn(&CandidateQA) -> bool + Sync,
    step: impl Fn(&PromptContext<'_>, &mut CandidateQA, &mut Vec<CallRecord>) -> Result<(), String> + Sync,
) -> (Vec<CandidateQA>, StageReport) {
    let mut report = StageReport::new(stage, candidates.len());
    let results = fan_out(&candidates, env.workers, |_, qa| {
        if !eligible(qa) {
            return (qa.clone(), None, Vec::new());
        }
        let mut qa = qa.clone();
        let mut log = Vec::new();
        let r = env.with_ctx(|ctx| step(ctx, &mut qa, &mut log));
        (qa, Some(r), log)
    });
    let mut out = Vec::with_capacity(results.len());
    for (qa, result, log) in results {
        report.count(&log);
        match result {
            None => report.skipped += 1,
            Some(Ok(())) => report.processed += 1,
            Some(Err(error)) => {
                report.processed += 1;
                report.failures.push(StageFailure { id: qa.qa_id.clone(), error });
            }
        }
        out.push(qa);
    }
    report.output = out.len();
    (out, report)
}

fn expanded(qa: &CandidateQA) -> bool {
    qa.a_ego.is_some() && qa.a_exo.is_some() && qa.a_both.is_some() && qa.a_text.is_some()
}

/// Step 2: fill the four answer conditions.
pub fn run_step2(env: &StageEnv<'_>, candidates: Vec<CandidateQA>) -> (Vec<CandidateQA>, StageReport) {
    map_candidates(env, "step2", candidates, |qa| !expanded(qa), |ctx, qa, log| {
        expand_responses(ctx, qa, log).map_err(|e: StepError| e.to_string())
    })
}

/// Step 3: judge-based filtering of expanded, undecided candidates.
pub fn run_step3(env: &StageEnv<'_>, candidates: Vec<CandidateQA>) -> (Vec<CandidateQA>, StageReport) {
    let (out, mut report) = map_candidates(
        env,
        "step3",
        candidates,
        |qa| qa.filter.verdict == Verdict::Pending && qa.a_both.is_some() && qa.a_text.is_some(),
        |ctx, qa, log| filter_question(ctx, qa, log).map_err(|e| e.to_string()),
    );
    for qa in out.iter().filter(|qa| qa.filter.verdict == Verdict::Pending && !(qa.a_both.is_some() && qa.a_text.is_some())) {
        report.diagnostics.push(format!("{}: step 2 answers missing, left pending", qa.qa_id));
    }
    (out, report)
}

/// Option generation for kept candidates missing an option set.
pub fn run_options(env: &StageEnv<'_>, candidates: Vec<CandidateQA>) -> (Vec<CandidateQA>, StageReport) {
    map_candidates(
        env,
        "options",
        candidates,
        |qa| qa.filter.verdict == Verdict::Kept && !(qa.option_sets.contains_key("ego") && qa.option_sets.contains_key("exo")),
        |ctx, qa, log| generate_options(ctx, qa, log).map_err(|e: OptionStageError| e.to_string()),
    )
}
