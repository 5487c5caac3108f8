//! Automated question construction over ego-exo frame pairs.
//!
//! Stages: single-view QA generation, four-condition answer expansion,
//! response-based filtering with an equivalence judge, and option generation
//! for the questions that survive. Every stage only fills fields that are
//! still empty, so re-running a stage over a partial corpus is cheap.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bench::Category;
use crate::bindings;
use crate::chat::ImageRef;
use crate::prompt::{keys, Bindings, TemplateKey, View};
use crate::trace::{CallRecord, PromptContext, StepError};

pub const FRAMES_PER_TAKE: usize = 8;
pub const QAS_PER_CATEGORY: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePair {
    pub pair_id: String,
    pub take_id: String,
    pub scenario: String,
    pub ego_image: ImageRef,
    pub exo_image: ImageRef,
    pub frame_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceView {
    Ego,
    Exo,
}

impl SourceView {
    pub fn view(self) -> View {
        match self {
            SourceView::Ego => View::Ego,
            SourceView::Exo => View::Exo,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceView::Ego => "ego",
            SourceView::Exo => "exo",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[default]
    Pending,
    Kept,
    DiscardedTextMatch,
    DiscardedBothMatch,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterState {
    pub text_matches_init: Option<bool>,
    pub both_in_init: Option<bool>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQA {
    pub qa_id: String,
    pub pair_id: String,
    pub take_id: String,
    pub scenario: String,
    pub category: Category,
    pub source_view: SourceView,
    pub ego_image: ImageRef,
    pub exo_image: ImageRef,
    pub question: String,
    pub a_init: String,
    #[serde(default)]
    pub a_ego: Option<String>,
    #[serde(default)]
    pub a_exo: Option<String>,
    #[serde(default)]
    pub a_both: Option<String>,
    #[serde(default)]
    pub a_text: Option<String>,
    #[serde(default)]
    pub filter: FilterState,
    /// Option sets keyed by source view name (`ego`, `exo`).
    #[serde(default)]
    pub option_sets: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub flags: BTreeSet<String>,
    /// Model-produced field name to the fingerprint of the request behind it.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

pub const FLAG_JUDGE_UNPARSEABLE: &str = "judge_unparseable";

pub fn option_parse_flag(view: SourceView) -> String {
    format!("option_parse_error_{}", view.name())
}

/// Single-view QA pairs Step 1 produces: pairs x 2 views x categories x QAs.
pub fn expected_generation_count(n_pairs: u64, categories: u64, qas_per_category: u64) -> u64 {
    n_pairs * 2 * categories * qas_per_category
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start_matches(['-', '*', ' ', '\t']);
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    t
}

/// `Q: text`, `Question: text`, `Question 2: text` (any case, optional bold).
fn labeled<'a>(line: &'a str, short: char, long: &str) -> Option<&'a str> {
    let t = strip_list_marker(line).trim_start_matches('*');
    let lower = t.to_ascii_lowercase();
    let rest_at = if lower.starts_with(long) {
        let after = &t[long.len()..];
        let n = after.chars().take_while(|c| c.is_ascii_digit() || *c == ' ').count();
        long.len() + n
    } else if lower.starts_with(short) {
        1
    } else {
        return None;
    };
    let rest = t[rest_at..].trim_start_matches('*');
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches('*').trim())
}

/// Parse Step-1 replies made of repeated question/answer blocks.
pub fn parse_qa_blocks(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut pending: Option<String> = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(q) = labeled(line, 'q', "question") {
            if let Some(prev) = pending.replace(q.to_string()) {
                diagnostics.push(format!("question without answer: {prev}"));
            }
        } else if let Some(a) = labeled(line, 'a', "answer") {
            match pending.take() {
                Some(q) if !q.is_empty() && !a.is_empty() => pairs.push((q, a.to_string())),
                Some(q) => diagnostics.push(format!("empty question or answer near: {q}")),
                None => diagnostics.push(format!("answer without question: {a}")),
            }
        }
    }
    if let Some(q) = pending {
        diagnostics.push(format!("question without answer: {q}"));
    }
    if pairs.is_empty() && diagnostics.is_empty() {
        diagnostics.push("no question/answer blocks found".to_string());
    }
    (pairs, diagnostics)
}

/// Step-2 answers come back in the `A: ...` output format; keep the answer.
pub fn clean_expansion_answer(text: &str) -> String {
    let trimmed = text.trim();
    for line in trimmed.lines() {
        if let Some(a) = labeled(line, 'a', "answer") {
            if !a.is_empty() {
                return a.to_string();
            }
        }
    }
    trimmed.to_string()
}

fn call_with_digest(
    ctx: &PromptContext<'_>,
    label: &str,
    key: &TemplateKey,
    bindings: &Bindings,
    log: &mut Vec<CallRecord>,
) -> Result<(String, String), StepError> {
    let request = ctx.request(key, bindings)?;
    let text = ctx.call(label, request, log)?;
    let digest = log.last().and_then(|c| c.request_digest.clone()).unwrap_or_default();
    Ok((text, digest))
}

fn image_of(pair: &FramePair, view: SourceView) -> &ImageRef {
    match view {
        SourceView::Ego => &pair.ego_image,
        SourceView::Exo => &pair.exo_image,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Step1Output {
    pub candidates: Vec<CandidateQA>,
    pub diagnostics: Vec<String>,
}

/// Step 1: one call per (view, category), eight per pair.
pub fn generate_single_view_qas(
    ctx: &PromptContext<'_>,
    pair: &FramePair,
    log: &mut Vec<CallRecord>,
) -> Result<Step1Output, StepError> {
    let mut out = Step1Output::default();
    for view in [SourceView::Ego, SourceView::Exo] {
        for category in Category::ALL {
            let sub = ctx.catalog.render_text(&keys::step1_category(view.view(), category), &Bindings::new())?;
            let image = image_of(pair, view);
            let b = match view {
                SourceView::Ego => bindings! { EgoImage => image, CategoryPrompt => sub },
                SourceView::Exo => bindings! { ExoImage => image, CategoryPrompt => sub },
            };
            let label = format!("step1/{}/{}", view.name(), category.snake());
            let (text, digest) = call_with_digest(ctx, &label, &keys::step1(view.view()), &b, log)?;
            let (pairs, diags) = parse_qa_blocks(&text);
            out.diagnostics.extend(diags.into_iter().map(|d| format!("{}: {label}: {d}", pair.pair_id)));
            for (n, (question, answer)) in pairs.into_iter().enumerate() {
                let mut provenance = BTreeMap::new();
                provenance.insert("question".to_string(), digest.clone());
                provenance.insert("a_init".to_string(), digest.clone());
                out.candidates.push(CandidateQA {
                    qa_id: format!("{}-{}-{}-{n}", pair.pair_id, view.name(), category.snake()),
                    pair_id: pair.pair_id.clone(),
                    take_id: pair.take_id.clone(),
                    scenario: pair.scenario.clone(),
                    category,
                    source_view: view,
                    ego_image: pair.ego_image.clone(),
                    exo_image: pair.exo_image.clone(),
                    question,
                    a_init: answer,
                    a_ego: None,
                    a_exo: None,
                    a_both: None,
                    a_text: None,
                    filter: FilterState::default(),
                    option_sets: BTreeMap::new(),
                    flags: BTreeSet::new(),
                    provenance,
                });
            }
        }
    }
    Ok(out)
}

/// Step 2: fill `a_ego`, `a_exo`, `a_both`, `a_text`, skipping fields that
/// are already present.
pub fn expand_responses(
    ctx: &PromptContext<'_>,
    qa: &mut CandidateQA,
    log: &mut Vec<CallRecord>,
) -> Result<(), StepError> {
    let sub = ctx.catalog.render_text(&keys::step2_category(qa.category), &Bindings::new())?;
    let q = qa.question.clone();
    let conditions: [(View, &str); 4] =
        [(View::Ego, "a_ego"), (View::Exo, "a_exo"), (View::Both, "a_both"), (View::TextOnly, "a_text")];
    for (view, field) in conditions {
        let slot = match view {
            View::Ego => &qa.a_ego,
            View::Exo => &qa.a_exo,
            View::Both => &qa.a_both,
            View::TextOnly => &qa.a_text,
        };
        if slot.is_some() {
            continue;
        }
        let (ego, exo) = (&qa.ego_image, &qa.exo_image);
        let b = match view {
            View::Ego => bindings! { EgoImage => ego, CategoryPrompt => sub.clone(), Question => q.clone() },
            View::Exo => bindings! { ExoImage => exo, CategoryPrompt => sub.clone(), Question => q.clone() },
            View::Both => {
                bindings! { EgoImage => ego, ExoImage => exo, CategoryPrompt => sub.clone(), Question => q.clone() }
            }
            View::TextOnly => bindings! { CategoryPrompt => sub.clone(), Question => q.clone() },
        };
        let label = format!("step2/{}/{}", qa.qa_id, field);
        let (text, digest) = call_with_digest(ctx, &label, &keys::step2(view), &b, log)?;
        let answer = Some(clean_expansion_answer(&text));
        match view {
            View::Ego => qa.a_ego = answer,
            View::Exo => qa.a_exo = answer,
            View::Both => qa.a_both = answer,
            View::TextOnly => qa.a_text = answer,
        }
        qa.provenance.insert(field.to_string(), digest);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeVerdict {
    Equivalent,
    NotEquivalent,
    Unparseable,
}

impl JudgeVerdict {
    /// Unparseable counts as not equivalent, which keeps the question.
    pub fn as_bool(self) -> bool {
        self == JudgeVerdict::Equivalent
    }
}

/// Map a judge reply by its leading token.
pub fn parse_judge(text: &str) -> JudgeVerdict {
    let token: String = text
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match token.as_str() {
        "yes" | "same" | "equivalent" => JudgeVerdict::Equivalent,
        "no" | "different" => JudgeVerdict::NotEquivalent,
        _ => JudgeVerdict::Unparseable,
    }
}

/// The verdict as a pure function of the two judge outcomes.
pub fn verdict_from(text_matches_init: Option<bool>, both_in_init: Option<bool>) -> Verdict {
    match (text_matches_init, both_in_init) {
        (Some(true), _) => Verdict::DiscardedTextMatch,
        (Some(false), Some(true)) => Verdict::DiscardedBothMatch,
        (Some(false), Some(false)) => Verdict::Kept,
        _ => Verdict::Pending,
    }
}

/// One judge call on (answer, label).
pub fn judge_equivalence(
    ctx: &PromptContext<'_>,
    key: &TemplateKey,
    bindings: &Bindings,
    label: &str,
    log: &mut Vec<CallRecord>,
) -> Result<(JudgeVerdict, String), StepError> {
    let (text, digest) = call_with_digest(ctx, label, key, bindings, log)?;
    Ok((parse_judge(&text), digest))
}

/// Step 3. The text-only judge runs first; a match skips the second call.
/// Leaves the verdict `Pending` when required answers are missing.
pub fn filter_question(ctx: &PromptContext<'_>, qa: &mut CandidateQA, log: &mut Vec<CallRecord>) -> Result<(), StepError> {
    let (Some(a_text), Some(a_both)) = (qa.a_text.clone(), qa.a_both.clone()) else {
        return Ok(());
    };
    if qa.filter.text_matches_init.is_none() {
        let b = bindings! { Question => qa.question.clone(), AnswerText => a_text, AnswerInit => qa.a_init.clone() };
        let label = format!("step3/{}/text", qa.qa_id);
        let (v, digest) = judge_equivalence(ctx, &keys::step3_judge(View::TextOnly), &b, &label, log)?;
        if v == JudgeVerdict::Unparseable {
            qa.flags.insert(FLAG_JUDGE_UNPARSEABLE.to_string());
        }
        qa.filter.text_matches_init = Some(v.as_bool());
        qa.provenance.insert("text_matches_init".to_string(), digest);
    }
    if qa.filter.text_matches_init == Some(false) && qa.filter.both_in_init.is_none() {
        let b = bindings! { Question => qa.question.clone(), AnswerBoth => a_both, AnswerInit => qa.a_init.clone() };
        let label = format!("step3/{}/both", qa.qa_id);
        let (v, digest) = judge_equivalence(ctx, &keys::step3_judge(View::Both), &b, &label, log)?;
        if v == JudgeVerdict::Unparseable {
            qa.flags.insert(FLAG_JUDGE_UNPARSEABLE.to_string());
        }
        qa.filter.both_in_init = Some(v.as_bool());
        qa.provenance.insert("both_in_init".to_string(), digest);
    }
    qa.filter.verdict = verdict_from(qa.filter.text_matches_init, qa.filter.both_in_init);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected 4 bracketed options, found {found}")]
pub struct OptionParseError {
    pub found: usize,
}

/// Parse `[option]` lines; exactly four are required.
pub fn parse_options(text: &str) -> Result<Vec<String>, OptionParseError> {
    let options: Vec<String> = text
        .lines()
        .map(|l| strip_list_marker(l.trim()))
        .filter_map(|l| l.strip_prefix('[').and_then(|r| r.strip_suffix(']')))
        .map(|o| o.trim().to_string())
        .filter(|o| !o.is_empty())
        .collect();
    if options.len() == 4 {
        Ok(options)
    } else {
        Err(OptionParseError { found: options.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OptionStageError {
    #[error("candidate {0} is not kept")]
    NotKept(String),
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Two calls (ego image with `a_ego`, exo image with `a_exo`). A set that
/// does not parse to four options is left out and flagged.
pub fn generate_options(
    ctx: &PromptContext<'_>,
    qa: &mut CandidateQA,
    log: &mut Vec<CallRecord>,
) -> Result<(), OptionStageError> {
    if qa.filter.verdict != Verdict::Kept {
        return Err(OptionStageError::NotKept(qa.qa_id.clone()));
    }
    for view in [SourceView::Ego, SourceView::Exo] {
        if qa.option_sets.contains_key(view.name()) {
            continue;
        }
        let q = qa.question.clone();
        let b = match view {
            SourceView::Ego => bindings! {
                EgoImage => &qa.ego_image, Question => q, AnswerEgo => qa.a_ego.clone().unwrap_or_default(),
            },
            SourceView::Exo => bindings! {
                ExoImage => &qa.exo_image, Question => q, AnswerExo => qa.a_exo.clone().unwrap_or_default(),
            },
        };
        let label = format!("options/{}/{}", qa.qa_id, view.name());
        let (text, digest) = call_with_digest(ctx, &label, &keys::option_gen(view.view()), &b, log)?;
        match parse_options(&text) {
            Ok(opts) => {
                qa.option_sets.insert(view.name().to_string(), opts);
                qa.flags.remove(&option_parse_flag(view));
                qa.provenance.insert(format!("option_sets.{}", view.name()), digest);
            }
            Err(_) => {
                qa.flags.insert(option_parse_flag(view));
            }
        }
    }
    Ok(())
}

impl CandidateQA {
    /// Kept with both option sets present.
    pub fn ready_for_curation(&self) -> bool {
        self.filter.verdict == Verdict::Kept
            && self.option_sets.get("ego").is_some_and(|o| o.len() == 4)
            && self.option_sets.get("exo").is_some_and(|o| o.len() == 4)
    }

    /// Invariants tying the verdict to the judge booleans.
    pub fn check_filter_invariants(&self) -> Result<(), String> {
        let f = &self.filter;
        match f.verdict {
            Verdict::Kept if f.text_matches_init != Some(false) || f.both_in_init != Some(false) => {
                Err(format!("{}: kept without two negative judges", self.qa_id))
            }
            Verdict::DiscardedTextMatch if f.text_matches_init != Some(true) => {
                Err(format!("{}: text discard without text match", self.qa_id))
            }
            Verdict::DiscardedBothMatch if f.both_in_init != Some(true) => {
                Err(format!("{}: both discard without both match", self.qa_id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub generated: u64,
    pub kept: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeStats {
    pub generated: u64,
    pub after_filter: u64,
    pub discarded_text_match: u64,
    pub discarded_both_match: u64,
    pub filter_rate_pct: f64,
    pub per_category: BTreeMap<Category, StageCount>,
    pub per_scenario: BTreeMap<String, StageCount>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{count} candidates still have a pending verdict (first: {first})")]
pub struct PendingVerdicts {
    pub count: usize,
    pub first: String,
}

pub fn forge_stats(candidates: &[CandidateQA]) -> Result<ForgeStats, PendingVerdicts> {
    let pending: Vec<&CandidateQA> = candidates.iter().filter(|c| c.filter.verdict == Verdict::Pending).collect();
    if let Some(first) = pending.first() {
        return Err(PendingVerdicts { count: pending.len(), first: first.qa_id.clone() });
    }
    let mut stats = ForgeStats {
        generated: candidates.len() as u64,
        after_filter: 0,
        discarded_text_match: 0,
        discarded_both_match: 0,
        filter_rate_pct: 0.0,
        per_category: BTreeMap::new(),
        per_scenario: BTreeMap::new(),
    };
    for c in candidates {
        let kept = c.filter.verdict == Verdict::Kept;
        match c.filter.verdict {
            Verdict::Kept => stats.after_filter += 1,
            Verdict::DiscardedTextMatch => stats.discarded_text_match += 1,
            Verdict::DiscardedBothMatch => stats.discarded_both_match += 1,
            Verdict::Pending => {}
        }
        let cat = stats.per_category.entry(c.category).or_default();
        cat.generated += 1;
        cat.kept += kept as u64;
        let s = stats.per_scenario.entry(c.scenario.clone()).or_default();
        s.generated += 1;
        s.kept += kept as u64;
    }
    stats.filter_rate_pct = filter_rate_pct(stats.generated, stats.after_filter);
    Ok(stats)
}

/// `100 * (1 - kept / generated)`, 0 for an empty corpus.
pub fn filter_rate_pct(generated: u64, kept: u64) -> f64 {
    if generated == 0 {
        return 0.0;
    }
    100.0 * (generated - kept) as f64 / generated as f64
}

/// Warnings for a frame-pair manifest: duplicate ids, out-of-range frame
/// indices, takes without exactly eight frames.
pub fn lint_frame_pairs(pairs: &[FramePair]) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut ids = BTreeSet::new();
    let mut per_take: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for p in pairs {
        if !ids.insert(p.pair_id.as_str()) {
            warnings.push(format!("duplicate pair_id {}", p.pair_id));
        }
        if p.frame_index as usize >= FRAMES_PER_TAKE {
            warnings.push(format!("pair {}: frame_index {} outside 0..{}", p.pair_id, p.frame_index, FRAMES_PER_TAKE));
        }
        if !per_take.entry(p.take_id.as_str()).or_default().insert(p.frame_index) {
            warnings.push(format!("take {}: frame_index {} repeated", p.take_id, p.frame_index));
        }
    }
    for (take, frames) in &per_take {
        if frames.len() != FRAMES_PER_TAKE {
            warnings.push(format!("take {take}: {} frames, expected {FRAMES_PER_TAKE}", frames.len()));
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_count() {
        assert_eq!(expected_generation_count(4600, 4, 3), 110_400);
        assert_eq!(expected_generation_count(0, 4, 3), 0);
        assert_eq!(expected_generation_count(10, 4, 3), 240);
    }

    #[test]
    fn qa_block_parsing() {
        let (p, d) = parse_qa_blocks("Q: What am I holding?\nA: A whisk");
        assert_eq!(p, [("What am I holding?".to_string(), "A whisk".to_string())]);
        assert!(d.is_empty());
        let (p, d) = parse_qa_blocks("Q: What am I holding?");
        assert!(p.is_empty());
        assert_eq!(d.len(), 1);
        let (p, _) = parse_qa_blocks("1. Question: How many cups?\n   Answer: 3\n2. **Question 2:** Where?\n**Answer:** Left");
        assert_eq!(p.len(), 2);
        assert_eq!(p[1], ("Where?".to_string(), "Left".to_string()));
    }

    #[test]
    fn judge_tokens() {
        assert_eq!(parse_judge("Yes"), JudgeVerdict::Equivalent);
        assert_eq!(parse_judge("No, they differ."), JudgeVerdict::NotEquivalent);
        assert_eq!(parse_judge("Possibly"), JudgeVerdict::Unparseable);
        assert_eq!(parse_judge("  Same meaning."), JudgeVerdict::Equivalent);
        assert_eq!(parse_judge("Nope"), JudgeVerdict::Unparseable);
    }

    #[test]
    fn verdict_table() {
        assert_eq!(verdict_from(Some(true), None), Verdict::DiscardedTextMatch);
        assert_eq!(verdict_from(Some(true), Some(false)), Verdict::DiscardedTextMatch);
        assert_eq!(verdict_from(Some(false), Some(true)), Verdict::DiscardedBothMatch);
        assert_eq!(verdict_from(Some(false), Some(false)), Verdict::Kept);
        assert_eq!(verdict_from(None, None), Verdict::Pending);
        assert_eq!(verdict_from(Some(false), None), Verdict::Pending);
    }

    #[test]
    fn option_parsing() {
        let four = "Options:\n[Frying pan]\n[Pot]\n[Kettle]\n[Bowl]\n";
        assert_eq!(parse_options(four).unwrap().len(), 4);
        assert_eq!(parse_options("[a]\n[b]\n[c]"), Err(OptionParseError { found: 3 }));
    }

    #[test]
    fn rate() {
        assert_eq!(filter_rate_pct(200, 43), 78.5);
        assert_eq!(filter_rate_pct(10, 10), 0.0);
        assert!((filter_rate_pct(110_400, 23_694) - 78.538).abs() < 1e-3);
    }

    #[test]
    fn expansion_answer_cleanup() {
        assert_eq!(clean_expansion_answer("A: Sitting cross-legged\n"), "Sitting cross-legged");
        assert_eq!(clean_expansion_answer("  Whisk "), "Whisk");
    }
}
