//! Three-agent scene-graph reasoning with cross-refinement and majority vote.
//!
//! Agents:
//! - `F1` builds one joint graph from both images.
//! - `F2` builds an ego-only graph, then refines it with the exo image.
//! - `F3` does the reverse.
//!
//! Iteration 0 is the state after initial generation. Each agent answers, the
//! answers are voted on, and on a tie the agents cross-refine: every agent
//! receives the other two agents' graphs from the same frozen snapshot. The
//! loop stops on consensus or after `max_iterations` refinement rounds, then
//! falls back to `F1`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::answer::{extract_choice_with_options, ChoiceLetter};
use crate::bench::BenchmarkItem;
use crate::bindings;
use crate::chat::ChatRequest;
use crate::prompt::{keys, PerspectiveAgent};
use crate::scene_graph::{extract, AgentTag, ExtractionOutcome, GraphOrigin};
use crate::trace::{CallRecord, PromptContext, StepError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    #[serde(rename = "F1_EgoExo")]
    F1EgoExo,
    #[serde(rename = "F2_Ego2Exo")]
    F2Ego2Exo,
    #[serde(rename = "F3_Exo2Ego")]
    F3Exo2Ego,
}

impl AgentId {
    pub const ALL: [AgentId; 3] = [AgentId::F1EgoExo, AgentId::F2Ego2Exo, AgentId::F3Exo2Ego];

    pub fn short(self) -> &'static str {
        match self {
            AgentId::F1EgoExo => "F1",
            AgentId::F2Ego2Exo => "F2",
            AgentId::F3Exo2Ego => "F3",
        }
    }

    pub fn perspective(self) -> PerspectiveAgent {
        match self {
            AgentId::F1EgoExo => PerspectiveAgent::EgoExo,
            AgentId::F2Ego2Exo => PerspectiveAgent::Ego2Exo,
            AgentId::F3Exo2Ego => PerspectiveAgent::Exo2Ego,
        }
    }

    pub fn tag(self) -> AgentTag {
        match self {
            AgentId::F1EgoExo => AgentTag::F1,
            AgentId::F2Ego2Exo => AgentTag::F2,
            AgentId::F3Exo2Ego => AgentTag::F3,
        }
    }

    /// The two other agents, in the order their graphs appear in this agent's
    /// cross-refinement prompt.
    pub fn peers(self) -> [AgentId; 2] {
        match self {
            AgentId::F1EgoExo => [AgentId::F2Ego2Exo, AgentId::F3Exo2Ego],
            AgentId::F2Ego2Exo => [AgentId::F3Exo2Ego, AgentId::F1EgoExo],
            AgentId::F3Exo2Ego => [AgentId::F1EgoExo, AgentId::F2Ego2Exo],
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M3CoTConfig {
    pub max_iterations: u32,
    pub consensus_threshold: u32,
    pub record_full_traces: bool,
}

impl Default for M3CoTConfig {
    fn default() -> Self {
        Self { max_iterations: 1, consensus_threshold: 2, record_full_traces: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("consensus_threshold must be 2 for three agents, got {0}")]
pub struct BadThreshold(pub u32);

impl M3CoTConfig {
    pub fn validate(&self) -> Result<(), BadThreshold> {
        if self.consensus_threshold != 2 {
            return Err(BadThreshold(self.consensus_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    Consensus(ChoiceLetter),
    NoConsensus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub kind: Vote,
    pub tally: BTreeMap<ChoiceLetter, u32>,
}

/// Majority vote over agent answers. `None` entries abstain.
pub fn tally_vote(answers: &[Option<ChoiceLetter>]) -> VoteOutcome {
    let mut tally = BTreeMap::new();
    for letter in answers.iter().flatten() {
        *tally.entry(*letter).or_insert(0) += 1;
    }
    let kind = tally
        .iter()
        .find(|(_, n)| **n >= 2)
        .map_or(Vote::NoConsensus, |(l, _)| Vote::Consensus(*l));
    VoteOutcome { kind, tally }
}

/// A graph produced by one agent at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGraph {
    pub agent: AgentId,
    pub iteration: u32,
    pub origin: GraphOrigin,
    pub outcome: ExtractionOutcome,
}

impl AgentGraph {
    fn from_text(agent: AgentId, iteration: u32, origin: GraphOrigin, text: &str) -> Self {
        Self { agent, iteration, origin, outcome: extract(text, origin, agent.tag(), iteration) }
    }

    /// Text injected into downstream prompts.
    pub fn prompt_text(&self) -> String {
        self.outcome.prompt_text()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: u32,
    pub graphs: BTreeMap<AgentId, AgentGraph>,
    pub answers: BTreeMap<AgentId, Option<ChoiceLetter>>,
    pub raw_answers: BTreeMap<AgentId, String>,
    pub vote: VoteOutcome,
    /// Single-view graphs F2 and F3 built before their view refinement.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub view_graphs: Vec<AgentGraph>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecidedBy {
    ConsensusAtIteration(u32),
    FallbackToF1,
}

pub const FLAG_F1_EARLIER: &str = "f1_fallback_used_earlier_iteration";
pub const FLAG_DEFAULT_A: &str = "f1_unparsed_default_option_a";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M3CoTResult {
    pub final_answer: ChoiceLetter,
    pub decided_by: DecidedBy,
    pub states: Vec<IterationState>,
    pub call_count: u32,
    pub flags: BTreeSet<String>,
    pub calls: Vec<CallRecord>,
}

/// A run aborted by a backend or prompt error; everything recorded so far is
/// kept.
#[derive(Debug, Clone, PartialEq)]
pub struct M3CoTFailure {
    pub error: StepError,
    pub agent: Option<AgentId>,
    pub states: Vec<IterationState>,
    pub calls: Vec<CallRecord>,
}

impl fmt::Display for M3CoTFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            Some(a) => write!(f, "agent {a}: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

struct Run<'c, 'a> {
    ctx: &'c PromptContext<'a>,
    item: &'c BenchmarkItem,
    question_prompt: String,
    calls: Vec<CallRecord>,
    states: Vec<IterationState>,
}

type AgentResult<T> = Result<T, (Option<AgentId>, StepError)>;

fn at<T>(agent: AgentId, r: Result<T, StepError>) -> AgentResult<T> {
    r.map_err(|e| (Some(agent), e))
}

impl Run<'_, '_> {
    fn send(&mut self, agent: AgentId, label: String, request: Result<ChatRequest, crate::prompt::PromptError>) -> AgentResult<String> {
        let request = at(agent, request.map_err(StepError::from))?;
        at(agent, self.ctx.call(&label, request, &mut self.calls))
    }

    fn generate(&mut self, agent: AgentId) -> AgentResult<(AgentGraph, Option<AgentGraph>)> {
        let item = self.item;
        let qp = self.question_prompt.clone();
        let key = keys::m3cot_generate(agent.perspective());
        let request = match agent {
            AgentId::F1EgoExo => self.ctx.request(
                &key,
                &bindings! { EgoImage => &item.ego_image, ExoImage => &item.exo_image, QuestionPrompt => qp.clone() },
            ),
            AgentId::F2Ego2Exo => {
                self.ctx.request(&key, &bindings! { EgoImage => &item.ego_image, QuestionPrompt => qp.clone() })
            }
            AgentId::F3Exo2Ego => {
                self.ctx.request(&key, &bindings! { ExoImage => &item.exo_image, QuestionPrompt => qp.clone() })
            }
        };
        let text = self.send(agent, format!("{agent}/sg_generate/0"), request)?;
        if agent == AgentId::F1EgoExo {
            return Ok((AgentGraph::from_text(agent, 0, GraphOrigin::Joint, &text), None));
        }
        let (first, refine_request) = {
            let first_origin = if agent == AgentId::F2Ego2Exo { GraphOrigin::EgoOnly } else { GraphOrigin::ExoOnly };
            let first = AgentGraph::from_text(agent, 0, first_origin, &text);
            let key = keys::m3cot_refine_view(agent.perspective());
            let prior = first.prompt_text();
            let request = if agent == AgentId::F2Ego2Exo {
                self.ctx.request(&key, &bindings! { ExoImage => &item.exo_image, QuestionPrompt => qp, AssistantResponse => prior })
            } else {
                self.ctx.request(&key, &bindings! { EgoImage => &item.ego_image, QuestionPrompt => qp, AssistantResponse => prior })
            };
            (first, request)
        };
        let text = self.send(agent, format!("{agent}/sg_refine_view/0"), refine_request)?;
        Ok((AgentGraph::from_text(agent, 0, GraphOrigin::RefinedView, &text), Some(first)))
    }

    fn answer(&mut self, graph: &AgentGraph) -> AgentResult<(Option<ChoiceLetter>, String)> {
        let item = self.item;
        let key = if graph.iteration == 0 {
            keys::m3cot_initial_answer(graph.agent.perspective())
        } else {
            keys::m3cot_refined_answer()
        };
        let request = self.ctx.request(
            &key,
            &bindings! {
                EgoImage => &item.ego_image,
                ExoImage => &item.exo_image,
                QuestionPrompt => self.question_prompt.clone(),
                AssistantResponse => graph.prompt_text(),
            },
        );
        let text = self.send(graph.agent, format!("{}/answer/{}", graph.agent, graph.iteration), request)?;
        Ok((extract_choice_with_options(&text, &item.options), text))
    }

    /// Refine `agent`'s graph from its peers' graphs in the frozen `snapshot`.
    fn cross_refine(&mut self, agent: AgentId, snapshot: &BTreeMap<AgentId, AgentGraph>) -> AgentResult<AgentGraph> {
        let item = self.item;
        let [a, b] = agent.peers();
        let (ga, gb) = (&snapshot[&a], &snapshot[&b]);
        let next = ga.iteration + 1;
        let request = self.ctx.request(
            &keys::m3cot_cross_refine(),
            &bindings! {
                SceneGraphA => ga.prompt_text(),
                SceneGraphB => gb.prompt_text(),
                EgoImage => &item.ego_image,
                ExoImage => &item.exo_image,
                QuestionPrompt => self.question_prompt.clone(),
            },
        );
        let text = self.send(agent, format!("{agent}/sg_cross_refine/{next}"), request)?;
        Ok(AgentGraph::from_text(agent, next, GraphOrigin::CrossRefined, &text))
    }

    fn finish_iteration(
        &mut self,
        iteration: u32,
        graphs: BTreeMap<AgentId, AgentGraph>,
        view_graphs: Vec<AgentGraph>,
    ) -> AgentResult<Vote> {
        let mut answers = BTreeMap::new();
        let mut raw_answers = BTreeMap::new();
        for agent in AgentId::ALL {
            let (letter, raw) = self.answer(&graphs[&agent])?;
            answers.insert(agent, letter);
            raw_answers.insert(agent, raw);
        }
        let ordered: Vec<Option<ChoiceLetter>> = AgentId::ALL.iter().map(|a| answers[a]).collect();
        let vote = tally_vote(&ordered);
        let kind = vote.kind;
        self.states.push(IterationState { iteration, graphs, answers, raw_answers, vote, view_graphs });
        Ok(kind)
    }
}

/// Run the full loop for one item.
pub fn run_m3cot(
    ctx: &PromptContext<'_>,
    item: &BenchmarkItem,
    config: &M3CoTConfig,
) -> Result<M3CoTResult, M3CoTFailure> {
    let question_prompt = match ctx.question_prompt(item) {
        Ok(q) => q,
        Err(e) => {
            return Err(M3CoTFailure { error: e.into(), agent: None, states: Vec::new(), calls: Vec::new() })
        }
    };
    let mut run = Run { ctx, item, question_prompt, calls: Vec::new(), states: Vec::new() };
    match drive(&mut run, config) {
        Ok(()) => {}
        Err((agent, error)) => {
            return Err(M3CoTFailure { error, agent, states: run.states, calls: run.calls });
        }
    }
    let (final_answer, decided_by, flags) = decide(&run.states);
    let mut calls = run.calls;
    let call_count = calls.len() as u32;
    if !config.record_full_traces {
        for c in &mut calls {
            c.request.turns.clear();
        }
    }
    Ok(M3CoTResult { final_answer, decided_by, states: run.states, call_count, flags, calls })
}

fn drive(run: &mut Run<'_, '_>, config: &M3CoTConfig) -> AgentResult<()> {
    let mut graphs = BTreeMap::new();
    let mut view_graphs = Vec::new();
    for agent in AgentId::ALL {
        let (graph, single_view) = run.generate(agent)?;
        graphs.insert(agent, graph);
        view_graphs.extend(single_view);
    }
    if let Vote::Consensus(_) = run.finish_iteration(0, graphs, view_graphs)? {
        return Ok(());
    }
    for t in 0..config.max_iterations {
        // Every refinement reads the same iteration-t snapshot.
        let snapshot = run.states[t as usize].graphs.clone();
        let mut next = BTreeMap::new();
        for agent in AgentId::ALL {
            next.insert(agent, run.cross_refine(agent, &snapshot)?);
        }
        if let Vote::Consensus(_) = run.finish_iteration(t + 1, next, Vec::new())? {
            return Ok(());
        }
    }
    Ok(())
}

/// Final answer from recorded states: consensus if the last state has one,
/// otherwise F1's last parseable answer, otherwise option A (flagged).
pub fn decide(states: &[IterationState]) -> (ChoiceLetter, DecidedBy, BTreeSet<String>) {
    let mut flags = BTreeSet::new();
    let Some(last) = states.last() else {
        flags.insert(FLAG_DEFAULT_A.to_string());
        return (ChoiceLetter::A, DecidedBy::FallbackToF1, flags);
    };
    if let Vote::Consensus(letter) = last.vote.kind {
        return (letter, DecidedBy::ConsensusAtIteration(last.iteration), flags);
    }
    if let Some(letter) = last.answers.get(&AgentId::F1EgoExo).copied().flatten() {
        return (letter, DecidedBy::FallbackToF1, flags);
    }
    let earlier = states.iter().rev().find_map(|s| s.answers.get(&AgentId::F1EgoExo).copied().flatten());
    match earlier {
        Some(letter) => {
            flags.insert(FLAG_F1_EARLIER.to_string());
            (letter, DecidedBy::FallbackToF1, flags)
        }
        None => {
            flags.insert(FLAG_DEFAULT_A.to_string());
            (ChoiceLetter::A, DecidedBy::FallbackToF1, flags)
        }
    }
}

/// The five initial-generation requests, without calling the backend. The
/// view-refinement requests embed a marker where the first graph would go.
pub fn preview_initial_requests(
    ctx: &PromptContext<'_>,
    item: &BenchmarkItem,
) -> Result<Vec<(String, ChatRequest)>, StepError> {
    let qp = ctx.question_prompt(item)?;
    let mut out = Vec::new();
    for agent in AgentId::ALL {
        let key = keys::m3cot_generate(agent.perspective());
        let b = match agent {
            AgentId::F1EgoExo => bindings! { EgoImage => &item.ego_image, ExoImage => &item.exo_image, QuestionPrompt => qp.clone() },
            AgentId::F2Ego2Exo => bindings! { EgoImage => &item.ego_image, QuestionPrompt => qp.clone() },
            AgentId::F3Exo2Ego => bindings! { ExoImage => &item.exo_image, QuestionPrompt => qp.clone() },
        };
        out.push((format!("{agent}/sg_generate/0"), ctx.request(&key, &b)?));
        if agent == AgentId::F1EgoExo {
            continue;
        }
        let marker = format!("<{agent} single-view scene graph>");
        let key = keys::m3cot_refine_view(agent.perspective());
        let b = if agent == AgentId::F2Ego2Exo {
            bindings! { ExoImage => &item.exo_image, QuestionPrompt => qp.clone(), AssistantResponse => marker }
        } else {
            bindings! { EgoImage => &item.ego_image, QuestionPrompt => qp.clone(), AssistantResponse => marker }
        };
        out.push((format!("{agent}/sg_refine_view/0"), ctx.request(&key, &b)?));
    }
    Ok(out)
}
