//! Human-verification state machine as a deterministic fold over an
//! append-only event log.
//!
//! Commands (`plan_*`) inspect the current state and return the log entry to
//! persist; [`CurationState::apply`] folds an entry into the state. Replaying
//! a log from the initial corpus therefore reproduces the served state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::{BenchmarkItem, Category, FieldError, Perspective};
use crate::forge::{CandidateQA, SourceView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ItemStatus {
    Queued,
    InReview,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptionProvenance {
    FromEgoAnswer,
    FromExoAnswer,
    FromBothAnswer,
    FromTextAnswer,
    FromEgoOptionSet,
    FromExoOptionSet,
    AnnotatorEdited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub final_question: String,
    pub final_options: Vec<String>,
    pub answer_index: usize,
    pub option_provenance: Vec<OptionProvenance>,
    #[serde(default)]
    pub annotator: String,
    #[serde(default)]
    pub decided_at: String,
}

impl Decision {
    /// Every invariant breach, one entry per field.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut err = |field: &'static str, message: String| errors.push(FieldError { field, message });
        if self.final_question.trim().is_empty() {
            err("final_question", "must be non-empty".into());
        }
        if self.final_options.len() != 4 {
            err("final_options", format!("expected 4 options, found {}", self.final_options.len()));
        } else {
            let normalized: Vec<String> = self.final_options.iter().map(|o| o.trim().to_lowercase()).collect();
            if normalized.iter().any(String::is_empty) {
                err("final_options", "options must be non-empty".into());
            }
            for (i, o) in normalized.iter().enumerate() {
                if normalized[..i].contains(o) {
                    err("final_options", format!("duplicate option `{}`", self.final_options[i].trim()));
                    break;
                }
            }
        }
        if self.answer_index > 3 {
            err("answer_index", format!("{} is outside 0..=3", self.answer_index));
        }
        if self.option_provenance.len() != 4 {
            err("option_provenance", format!("expected 4 entries, found {}", self.option_provenance.len()));
        }
        if self.annotator.trim().is_empty() {
            err("annotator", "must be non-empty".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Equality ignoring the timestamp, used to recognize retries.
    pub fn same_payload(&self, other: &Decision) -> bool {
        Decision { decided_at: String::new(), ..self.clone() } == Decision { decided_at: String::new(), ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationItem {
    pub qa_id: String,
    pub candidate: CandidateQA,
    pub status: ItemStatus,
    pub assigned_to: Option<String>,
    pub decision: Option<Decision>,
    pub reject_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Assign,
    Accept,
    Reject,
    Reopen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub qa_id: String,
    pub action: Action,
    #[serde(default)]
    pub payload: Value,
    pub actor: String,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CurationError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("item {qa_id} is not in review by {annotator}")]
    NotAssigned { qa_id: String, annotator: String },
    #[error("invalid decision: {}", join_fields(.0))]
    InvalidDecision(Vec<FieldError>),
    #[error("cannot {action:?} item {qa_id} in state {from:?}")]
    InvalidTransition { qa_id: String, from: ItemStatus, action: Action },
    #[error("log entry seq {got}, expected {expected}")]
    BadSequence { expected: u64, got: u64 },
    #[error("malformed payload for {qa_id}: {message}")]
    BadPayload { qa_id: String, message: String },
}

fn join_fields(errors: &[FieldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("candidate {0} is not kept with both option sets")]
    NotReady(String),
    #[error("duplicate qa_id {0}")]
    Duplicate(String),
}

/// What a command resolved to.
#[derive(Debug, Clone, PartialEq)]
pub enum Planned {
    /// Persist, then apply.
    Append(LogEntry),
    /// An identical request was already applied; nothing to write.
    AlreadyApplied,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub queued: u64,
    pub in_review: u64,
    pub accepted: u64,
    pub rejected: u64,
}

impl StatusCounts {
    fn bump(&mut self, status: ItemStatus) {
        match status {
            ItemStatus::Queued => self.queued += 1,
            ItemStatus::InReview => self.in_review += 1,
            ItemStatus::Accepted => self.accepted += 1,
            ItemStatus::Rejected => self.rejected += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.queued + self.in_review + self.accepted + self.rejected
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    #[serde(flatten)]
    pub totals: StatusCounts,
    pub per_annotator: BTreeMap<String, StatusCounts>,
    pub per_category: BTreeMap<Category, StatusCounts>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationState {
    pub items: BTreeMap<String, CurationItem>,
    pub next_seq: u64,
}

#[derive(Deserialize)]
struct RejectPayload {
    reason: String,
}

impl CurationState {
    pub fn new(candidates: Vec<CandidateQA>) -> Result<Self, CorpusError> {
        let mut items = BTreeMap::new();
        for c in candidates {
            if !c.ready_for_curation() {
                return Err(CorpusError::NotReady(c.qa_id));
            }
            let qa_id = c.qa_id.clone();
            let item = CurationItem {
                qa_id: qa_id.clone(),
                candidate: c,
                status: ItemStatus::Queued,
                assigned_to: None,
                decision: None,
                reject_reason: None,
            };
            if items.insert(qa_id.clone(), item).is_some() {
                return Err(CorpusError::Duplicate(qa_id));
            }
        }
        Ok(Self { items, next_seq: 1 })
    }

    /// Fold a whole log from a fresh corpus.
    pub fn replay(candidates: Vec<CandidateQA>, log: &[LogEntry]) -> Result<Self, ReplayError> {
        let mut state = Self::new(candidates).map_err(ReplayError::Corpus)?;
        for entry in log {
            state.apply(entry).map_err(ReplayError::Entry)?;
        }
        Ok(state)
    }

    pub fn get(&self, qa_id: &str) -> Result<&CurationItem, CurationError> {
        self.items.get(qa_id).ok_or_else(|| CurationError::UnknownItem(qa_id.to_string()))
    }

    fn entry(&self, qa_id: &str, action: Action, payload: Value, actor: &str, at: &str) -> LogEntry {
        LogEntry {
            seq: self.next_seq,
            qa_id: qa_id.to_string(),
            action,
            payload,
            actor: actor.to_string(),
            at: at.to_string(),
        }
    }

    /// The item `annotator` already has in review, if any, else an Assign
    /// entry for the lowest queued qa_id matching `category`. `None` when the
    /// queue is empty.
    pub fn plan_next(&self, annotator: &str, category: Option<Category>, at: &str) -> Option<Result<String, LogEntry>> {
        let matches = |i: &&CurationItem| category.map_or(true, |c| i.candidate.category == c);
        if let Some(held) = self
            .items
            .values()
            .filter(matches)
            .find(|i| i.status == ItemStatus::InReview && i.assigned_to.as_deref() == Some(annotator))
        {
            return Some(Ok(held.qa_id.clone()));
        }
        let next = self.items.values().filter(matches).find(|i| i.status == ItemStatus::Queued)?;
        Some(Err(self.entry(&next.qa_id, Action::Assign, Value::Object(Default::default()), annotator, at)))
    }

    fn require_review(&self, qa_id: &str, annotator: &str) -> Result<&CurationItem, CurationError> {
        let item = self.get(qa_id)?;
        if item.status != ItemStatus::InReview || item.assigned_to.as_deref() != Some(annotator) {
            return Err(CurationError::NotAssigned { qa_id: qa_id.to_string(), annotator: annotator.to_string() });
        }
        Ok(item)
    }

    pub fn plan_accept(&self, qa_id: &str, annotator: &str, mut decision: Decision, at: &str) -> Result<Planned, CurationError> {
        decision.annotator = annotator.to_string();
        decision.decided_at = at.to_string();
        let item = self.get(qa_id)?;
        if item.status == ItemStatus::Accepted
            && item.assigned_to.as_deref() == Some(annotator)
            && item.decision.as_ref().is_some_and(|d| d.same_payload(&decision))
        {
            return Ok(Planned::AlreadyApplied);
        }
        self.require_review(qa_id, annotator)?;
        decision.validate().map_err(CurationError::InvalidDecision)?;
        let payload = serde_json::to_value(&decision)
            .map_err(|e| CurationError::BadPayload { qa_id: qa_id.to_string(), message: e.to_string() })?;
        Ok(Planned::Append(self.entry(qa_id, Action::Accept, payload, annotator, at)))
    }

    pub fn plan_reject(&self, qa_id: &str, annotator: &str, reason: &str, at: &str) -> Result<Planned, CurationError> {
        let item = self.get(qa_id)?;
        if item.status == ItemStatus::Rejected
            && item.assigned_to.as_deref() == Some(annotator)
            && item.reject_reason.as_deref() == Some(reason)
        {
            return Ok(Planned::AlreadyApplied);
        }
        self.require_review(qa_id, annotator)?;
        if reason.trim().is_empty() {
            return Err(CurationError::InvalidDecision(alloc::vec![FieldError {
                field: "reason",
                message: "must be non-empty".into()
            }]));
        }
        let payload = serde_json::json!({ "reason": reason });
        Ok(Planned::Append(self.entry(qa_id, Action::Reject, payload, annotator, at)))
    }

    /// Send a decided item back to the queue for another review.
    pub fn plan_reopen(&self, qa_id: &str, actor: &str, at: &str) -> Result<Planned, CurationError> {
        let item = self.get(qa_id)?;
        match item.status {
            ItemStatus::Accepted | ItemStatus::Rejected => {
                Ok(Planned::Append(self.entry(qa_id, Action::Reopen, Value::Object(Default::default()), actor, at)))
            }
            from => Err(CurationError::InvalidTransition { qa_id: qa_id.to_string(), from, action: Action::Reopen }),
        }
    }

    /// Fold one entry. Rejects entries that would break an invariant.
    pub fn apply(&mut self, entry: &LogEntry) -> Result<(), CurationError> {
        if entry.seq != self.next_seq {
            return Err(CurationError::BadSequence { expected: self.next_seq, got: entry.seq });
        }
        let qa_id = entry.qa_id.clone();
        let item = self.items.get_mut(&qa_id).ok_or_else(|| CurationError::UnknownItem(qa_id.clone()))?;
        let bad = |from| CurationError::InvalidTransition { qa_id: qa_id.clone(), from, action: entry.action };
        let reviewing = item.status == ItemStatus::InReview && item.assigned_to.as_deref() == Some(entry.actor.as_str());
        match entry.action {
            Action::Assign => {
                if item.status != ItemStatus::Queued {
                    return Err(bad(item.status));
                }
                item.status = ItemStatus::InReview;
                item.assigned_to = Some(entry.actor.clone());
            }
            Action::Accept => {
                if !reviewing {
                    return Err(bad(item.status));
                }
                let decision: Decision = serde_json::from_value(entry.payload.clone())
                    .map_err(|e| CurationError::BadPayload { qa_id: qa_id.clone(), message: e.to_string() })?;
                decision.validate().map_err(CurationError::InvalidDecision)?;
                item.status = ItemStatus::Accepted;
                item.decision = Some(decision);
                item.reject_reason = None;
            }
            Action::Reject => {
                if !reviewing {
                    return Err(bad(item.status));
                }
                let p: RejectPayload = serde_json::from_value(entry.payload.clone())
                    .map_err(|e| CurationError::BadPayload { qa_id: qa_id.clone(), message: e.to_string() })?;
                item.status = ItemStatus::Rejected;
                item.reject_reason = Some(p.reason);
                item.decision = None;
            }
            Action::Reopen => {
                if !matches!(item.status, ItemStatus::Accepted | ItemStatus::Rejected) {
                    return Err(bad(item.status));
                }
                item.status = ItemStatus::Queued;
                item.assigned_to = None;
                item.decision = None;
                item.reject_reason = None;
            }
        }
        self.next_seq += 1;
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for item in self.items.values() {
            p.totals.bump(item.status);
            p.per_category.entry(item.candidate.category).or_default().bump(item.status);
            if let Some(a) = &item.assigned_to {
                p.per_annotator.entry(a.clone()).or_default().bump(item.status);
            }
        }
        p
    }

    /// Accepted items as benchmark lines, ordered by qa_id.
    pub fn export(&self) -> Vec<BenchmarkItem> {
        self.items
            .values()
            .filter(|i| i.status == ItemStatus::Accepted)
            .filter_map(|i| {
                let d = i.decision.as_ref()?;
                let c = &i.candidate;
                Some(BenchmarkItem {
                    id: i.qa_id.clone(),
                    category: c.category,
                    question_perspective: match c.source_view {
                        SourceView::Ego => Perspective::Ego,
                        SourceView::Exo => Perspective::Exo,
                    },
                    ego_image: c.ego_image.clone(),
                    exo_image: c.exo_image.clone(),
                    question: d.final_question.clone(),
                    options: d.final_options.clone(),
                    answer_index: d.answer_index,
                    required_views: None,
                    source_take: Some(c.take_id.clone()),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Corpus(CorpusError),
    #[error(transparent)]
    Entry(CurationError),
}
