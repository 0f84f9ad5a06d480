//! Asynchronous evidence agents.
//!
//! Three agents read committed state and each commit one learner-model
//! update carrying their evidence text:
//!
//! * strategy: problem-solving pattern over the recent action window;
//! * assessment: learner state from mastery changes, strategy and history;
//! * knowledge: gaps against the expert reference plus retrieved notes.
//!
//! Each has a rule-based reference implementation and an optional
//! backend-driven variant that falls back to the reference on bad replies.
//! Agents never touch dialogue fields.

pub mod assessment;
pub mod knowledge;
pub mod strategy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::TokenFilter;
use crate::backends::{ChatBackend, Embedder, TemplateSet};
use crate::catalog::Catalog;
use crate::learner::{LearnerModelUpdate, LearnerStore, StrategyEstimate};
use crate::model::{
    checksum, ActionKind, CallRecord, CanonicalModel, DyadId, LearnerState, MasteryDelta, MasteryScore,
    ProcessedAction, TaskId, Timestamp,
};
use crate::Result;

pub use assessment::{assess_learner_state, AssessmentFinding, AssessmentInput, AssessmentParams};
pub use knowledge::{find_gaps, GapFinding, KnowledgeCorpus, KnowledgeDoc, Retriever, TagOverlapRetriever};
pub use strategy::{detect_strategy, StrategyFinding, StrategyParams};

pub const STRATEGY_AGENT: &str = "strategy_agent";
pub const ASSESSMENT_AGENT: &str = "assessment_agent";
pub const KNOWLEDGE_AGENT: &str = "knowledge_agent";

/// Up to `n` action descriptions, most recent last, joined with `; `.
pub(crate) fn summarize_actions(actions: &[ProcessedAction], n: usize) -> String {
    let start = actions.len().saturating_sub(n);
    let parts: Vec<&str> = actions[start..].iter().map(|a| a.description.as_str()).collect();
    if parts.is_empty() {
        "no actions".into()
    } else {
        parts.join("; ")
    }
}

pub(crate) fn call_record(purpose: &str, prompt: &str, raw: &str, model: &str, latency_ms: u64) -> CallRecord {
    CallRecord {
        purpose: purpose.into(),
        prompt_checksum: checksum(prompt.as_bytes()),
        raw_reply: raw.into(),
        model: model.into(),
        latency_ms,
    }
}

/// Makes sure `evidence` shares at least one filtered stem with the inputs it
/// claims to rest on, appending the first input when it does not.
pub fn ground(evidence: &str, supports: &[&str]) -> String {
    let filter = TokenFilter::default();
    let support_stems: std::collections::BTreeSet<String> = supports.iter().flat_map(|s| filter.stems(s)).collect();
    if support_stems.is_empty() {
        return evidence.trim().to_string();
    }
    let ev = filter.stems(evidence);
    if ev.iter().any(|s| support_stems.contains(s)) {
        return evidence.trim().to_string();
    }
    let first = supports.iter().find(|s| !filter.stems(s).is_empty()).expect("some support has stems");
    let e = evidence.trim();
    if e.is_empty() {
        format!("Based on: {first}.")
    } else {
        format!("{e} (based on: {first})")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerPolicy {
    /// Run after this many actions since the last run; 0 disables counting.
    pub every_n_actions: usize,
    pub on_run: bool,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self { every_n_actions: 10, on_run: true }
    }
}

impl TriggerPolicy {
    pub fn fires(&self, actions_since_last: usize, latest: &ProcessedAction) -> bool {
        (self.on_run && latest.category == ActionKind::Run)
            || (self.every_n_actions > 0 && actions_since_last >= self.every_n_actions)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    #[serde(default)]
    pub strategy: StrategyParams,
    #[serde(default)]
    pub assessment: AssessmentParams,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub trigger: TriggerPolicy,
}

fn default_top_k() -> usize {
    3
}

/// What the agents see for one run, all taken from committed session state.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceContext<'a> {
    pub dyad: &'a DyadId,
    pub task: &'a TaskId,
    pub actions: &'a [ProcessedAction],
    /// Aligned with `actions`.
    pub deltas: &'a [MasteryDelta],
    pub model: &'a CanonicalModel,
    pub mastery: &'a MasteryScore,
    pub now: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub versions: Vec<u64>,
    pub calls: Vec<CallRecord>,
}

pub struct EvidenceAgents {
    pub config: AgentConfig,
    pub catalog: Arc<Catalog>,
    pub backend: Option<Arc<dyn ChatBackend>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub templates: TemplateSet,
}

const COMMIT_ATTEMPTS: usize = 16;

impl EvidenceAgents {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        Self { config: AgentConfig::default(), catalog, backend: None, embedder: None, templates: TemplateSet::bundled() }
    }

    /// Runs strategy, assessment and knowledge in turn, committing after each.
    pub fn run(&self, store: &LearnerStore, ctx: &EvidenceContext<'_>) -> Result<AgentRun> {
        let mut run = AgentRun::default();

        let (finding, call) = match &self.backend {
            Some(b) => strategy::detect_strategy_llm(ctx.actions, &self.config.strategy, b.as_ref(), &self.templates),
            None => (detect_strategy(ctx.actions, &self.config.strategy), None),
        };
        run.calls.extend(call);
        let v = store.commit_with(ctx.dyad, COMMIT_ATTEMPTS, |_| LearnerModelUpdate {
            strategy: Some(StrategyEstimate { label: finding.label, confidence: finding.confidence }),
            evidence: Some(finding.evidence_text.clone()),
            ..LearnerModelUpdate::by(STRATEGY_AGENT, ctx.now)
        })?;
        run.versions.push(v);

        let snapshot = store.read(ctx.dyad)?;
        let mut prior: Vec<LearnerState> = snapshot.history.iter().map(|h| h.learner_state).collect();
        prior.push(snapshot.learner_state);
        let input = AssessmentInput {
            model: ctx.model,
            strategy: &finding,
            actions: ctx.actions,
            deltas: ctx.deltas,
            prior_states: &prior,
            now: ctx.now,
        };
        let (assessment, call) = match &self.backend {
            Some(b) => assessment::assess_learner_state_llm(&input, &self.config.assessment, b.as_ref(), &self.templates),
            None => (assess_learner_state(&input, &self.config.assessment), None),
        };
        run.calls.extend(call);
        let v = store.commit_with(ctx.dyad, COMMIT_ATTEMPTS, |_| LearnerModelUpdate {
            learner_state: Some(assessment.label),
            mastery: Some(ctx.mastery.clone()),
            evidence: Some(assessment.evidence_text.clone()),
            ..LearnerModelUpdate::by(ASSESSMENT_AGENT, ctx.now)
        })?;
        run.versions.push(v);

        let bundle = self.catalog.task(ctx.task);
        let retriever: Box<dyn Retriever + '_> = match &self.embedder {
            Some(e) => Box::new(knowledge::EmbeddingRetriever { embedder: e.as_ref() }),
            None => Box::new(TagOverlapRetriever),
        };
        let found = find_gaps(
            ctx.model,
            bundle.and_then(|b| b.expert.as_ref()),
            bundle.map(|b| &b.rubric),
            &self.catalog.corpus,
            retriever.as_ref(),
            self.config.top_k,
            ctx.task,
        );
        let (mut gaps, no_reference) = match found {
            Ok(g) => (g, false),
            Err(crate::Error::NoExpertReference(_)) => (Vec::new(), true),
            Err(e) => return Err(e),
        };
        if let (Some(b), Some(first)) = (&self.backend, gaps.first_mut()) {
            let (explained, call) = knowledge::explain_gap_llm(first, b.as_ref(), &self.templates);
            *first = explained;
            run.calls.extend(call);
        }
        let evidence = match gaps.first() {
            Some(g) if gaps.len() == 1 => g.evidence_text.clone(),
            Some(g) => format!("{} {} other components still differ from the reference.", g.evidence_text, gaps.len() - 1),
            None if no_reference => format!("No expert reference is available for task {}.", ctx.task),
            None => "Every component matches the expert reference.".into(),
        };
        let records: Vec<_> = gaps.iter().map(GapFinding::to_record).collect();
        let v = store.commit_with(ctx.dyad, COMMIT_ATTEMPTS, |_| LearnerModelUpdate {
            knowledge_gaps: Some(records.clone()),
            evidence: Some(evidence.clone()),
            ..LearnerModelUpdate::by(KNOWLEDGE_AGENT, ctx.now)
        })?;
        run.versions.push(v);
        Ok(run)
    }
}
