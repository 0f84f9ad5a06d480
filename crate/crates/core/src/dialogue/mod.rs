//! The synchronous dialogue agent: classify the students' message, pick a
//! policy from the dialogue state and the learner model, write a talk move,
//! and record the whole chain as an evidence trace.

pub mod classify;
pub mod policy;
pub mod talk;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::backends::{complete_with_retry, BackendError, ChatBackend, ReplySchema, TemplateSet};
use crate::catalog::Catalog;
use crate::learner::{DialogueMemory, LearnerModel, LearnerModelUpdate, LearnerStore};
use crate::model::{
    BackendMetadata, CanonicalModel, DialoguePolicy, DialogueStateLabel, DyadId, EvidenceTrace, InputSnapshot,
    PolicyKind, ProcessedAction, SessionId, TalkMove, TaskId, Timestamp, TraceFlag, TraceId,
};
use crate::{Error, Result};

pub use classify::{classify_keywords, classify_with_backend, Classification};
pub use policy::{PolicyContext, PolicyRule, PolicyRuleTable, RepetitionDamper, RuleDecision};
pub use talk::{generate_talk_move, templated_move, Guardrails, TalkBundle, TalkOutcome};

pub const DIALOGUE_AGENT: &str = "dialogue_agent";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub dyad: DyadId,
    pub session: SessionId,
    pub message: String,
    pub timestamp: Timestamp,
}

impl TurnRequest {
    pub fn validate(&self) -> Result<()> {
        if self.message.trim().is_empty() {
            return Err(Error::Invalid("turn message is empty".into()));
        }
        Ok(())
    }
}

/// One completed exchange, kept as conversation history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_index: u32,
    pub timestamp: Timestamp,
    pub message: String,
    pub state: DialogueStateLabel,
    pub policy: PolicyKind,
    pub talk_move: String,
    pub trace: TraceId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// The rule table decides.
    #[default]
    Rules,
    /// The backend proposes; proposals no matching rule would make are vetoed.
    BackendWithVeto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    #[serde(default)]
    pub policy_mode: PolicyMode,
    /// Most recent processed actions placed in the input snapshot.
    #[serde(default = "default_window")]
    pub window_actions: usize,
    /// Prior turns shown to the backend.
    #[serde(default = "default_history")]
    pub history_turns: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_window() -> usize {
    30
}

fn default_history() -> usize {
    6
}

fn default_retries() -> u32 {
    2
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self { policy_mode: PolicyMode::Rules, window_actions: 30, history_turns: 6, max_retries: 2 }
    }
}

/// Everything about the session a turn needs, read from committed state.
#[derive(Clone, Copy, Debug)]
pub struct TurnContext<'a> {
    pub request: &'a TurnRequest,
    pub task: &'a TaskId,
    pub turn_index: u32,
    /// The session's processed actions so far; the window is taken from the end.
    pub actions: &'a [ProcessedAction],
    pub model: &'a CanonicalModel,
    pub mastery_at_turn: Option<f64>,
    pub history: &'a [ConversationTurn],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub talk_move: TalkMove,
    pub trace: EvidenceTrace,
    /// Learner-model version written by the turn's dialogue commit.
    pub committed_version: u64,
}

impl TurnOutcome {
    /// True when the backend failed and the move came from a fallback.
    pub fn backend_failed(&self) -> bool {
        self.trace.flags.contains(&TraceFlag::BackendFailure)
    }
}

pub fn trace_id(session: &SessionId, turn_index: u32) -> TraceId {
    TraceId::new(format!("{session}-t{turn_index:04}")).expect("session ids are non-empty")
}

fn history_text(history: &[ConversationTurn], n: usize) -> String {
    let start = history.len().saturating_sub(n);
    let lines: Vec<String> = history[start..]
        .iter()
        .map(|t| format!("Students: {}\nTutor ({}): {}", t.message, t.policy, t.talk_move))
        .collect();
    if lines.is_empty() {
        "(no earlier turns)".into()
    } else {
        lines.join("\n")
    }
}

/// Agents' latest evidence, without the dialogue agent's own earlier entry.
fn agent_evidence(lm: &LearnerModel) -> BTreeMap<String, String> {
    lm.evidence
        .iter()
        .filter(|(k, v)| k.as_str() != DIALOGUE_AGENT && !v.trim().is_empty())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub struct DialogueAgent {
    pub config: DialogueConfig,
    pub catalog: Arc<Catalog>,
    pub backend: Option<Arc<dyn ChatBackend>>,
    pub templates: TemplateSet,
    rules: RwLock<Arc<PolicyRuleTable>>,
    dyad_locks: Mutex<HashMap<DyadId, Arc<Mutex<()>>>>,
}

impl DialogueAgent {
    pub fn new(catalog: Arc<Catalog>, rules: PolicyRuleTable) -> Self {
        Self {
            config: DialogueConfig::default(),
            catalog,
            backend: None,
            templates: TemplateSet::bundled(),
            rules: RwLock::new(Arc::new(rules)),
            dyad_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_backend(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn rules(&self) -> Arc<PolicyRuleTable> {
        self.rules.read().clone()
    }

    /// Swaps in a new table. Turns already deciding keep the table they read.
    pub fn reload_rules(&self, table: PolicyRuleTable) -> Result<()> {
        table.validate()?;
        *self.rules.write() = Arc::new(table);
        Ok(())
    }

    fn dyad_lock(&self, dyad: &DyadId) -> Arc<Mutex<()>> {
        self.dyad_locks.lock().entry(dyad.clone()).or_default().clone()
    }

    /// Runs one turn: classify, decide, generate, then commit the dialogue
    /// fields. Turns for one dyad are serialized; other dyads run concurrently.
    pub fn run_turn(&self, store: &LearnerStore, ctx: &TurnContext<'_>) -> Result<TurnOutcome> {
        ctx.request.validate()?;
        let lock = self.dyad_lock(&ctx.request.dyad);
        let _guard = lock.lock();

        let lm = store.read_or_initial(&ctx.request.dyad)?;
        let rules = self.rules();
        let history = history_text(ctx.history, self.config.history_turns);
        let backend = self.backend.as_deref();
        let mut calls = Vec::new();
        let mut flags: Vec<TraceFlag> = Vec::new();
        let mut used_templates = Vec::new();

        let classification = match backend {
            Some(b) => {
                used_templates.push("dialogue_state");
                classify_with_backend(&ctx.request.message, &history, b, &self.templates, self.config.max_retries)?
            }
            None => {
                let (state, cue) = classify_keywords(&ctx.request.message);
                Classification { state, evidence_text: cue, call: None, flags: vec![] }
            }
        };
        calls.extend(classification.call.clone());
        flags.extend(classification.flags.iter().copied());
        let state = classification.state.clone();

        let pctx = PolicyContext::from_model(state.label, &lm);
        let mut decision = rules.decide(&pctx);
        let focus = lm.knowledge_gaps.first();
        let mut evidence = agent_evidence(&lm);
        let evidence_joined = evidence.values().cloned().collect::<Vec<_>>().join("\n");
        let mut proposal_note = None;

        if let (PolicyMode::BackendWithVeto, Some(b)) = (self.config.policy_mode, backend) {
            used_templates.push("policy");
            let gaps = lm
                .knowledge_gaps
                .iter()
                .map(|g| format!("{} ({})", g.component, g.observed.as_deref().unwrap_or("missing")))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = self.templates.get("policy")?.render(
                &[("state", format!("{} - {}", state.label, state.summary)), ("evidence", evidence_joined.clone()), ("gaps", gaps)]
                    .into_iter()
                    .collect(),
            )?;
            let schema = ReplySchema::new("policy").one_of("policy", PolicyKind::ALL.iter().map(|p| p.label())).optional("rationale");
            match complete_with_retry(b, &prompt, &schema, self.config.max_retries) {
                Ok(reply) => {
                    calls.push(crate::agents::call_record("policy", &prompt, &reply.raw, &reply.model, reply.latency_ms));
                    let proposed = reply.field("policy").and_then(PolicyKind::parse);
                    match proposed {
                        Some(p) if rules.admissible(&pctx).contains(&p) => {
                            decision = RuleDecision { policy: p, rule_id: decision.rule_id, damped: false };
                            let why = reply.field("rationale").unwrap_or(reply.evidence_text.as_str()).trim().to_string();
                            if !why.is_empty() {
                                proposal_note = Some(format!(" The backend proposed {p}: {why}"));
                            }
                        }
                        Some(p) => {
                            flags.push(TraceFlag::LlmPolicyVetoed);
                            proposal_note = Some(format!(" The backend proposed {p}, which the rule table does not allow here."));
                        }
                        None => flags.push(TraceFlag::MalformedBackendOutput),
                    }
                }
                Err(e @ BackendError::ScriptExhausted { .. }) => return Err(e.into()),
                Err(e) => {
                    calls.push(crate::agents::call_record("policy", &prompt, e.raw_reply().unwrap_or_default(), b.model_name(), 0));
                    flags.push(if matches!(e, BackendError::Parse { .. }) {
                        TraceFlag::MalformedBackendOutput
                    } else {
                        TraceFlag::BackendFailure
                    });
                }
            }
        }

        let focus_key = focus.map(|g| g.component.as_str());
        let mut rationale =
            policy::rationale(&state, &pctx, &decision, lm.strategy.label.label(), focus_key, &rules);
        if let Some(note) = proposal_note {
            rationale.push_str(&note);
        }

        let bundle_evidence = if evidence_joined.is_empty() { classification.evidence_text.clone() } else { evidence_joined };
        let bundle = TalkBundle {
            policy: decision.policy,
            rationale: &rationale,
            state_summary: &state.summary,
            evidence: &bundle_evidence,
            focus,
            history: &history,
            variant: ctx.turn_index as usize,
        };
        let task_bundle = self.catalog.task(ctx.task);
        let guardrails = Guardrails::new(task_bundle.map(|b| &b.rubric), &self.catalog.table);
        if backend.is_some() {
            used_templates.push("talk_move");
        }
        let talk = generate_talk_move(&bundle, backend, &self.templates, &guardrails, self.config.max_retries)?;
        calls.extend(talk.calls.iter().cloned());
        for f in &talk.flags {
            if !flags.contains(f) {
                flags.push(*f);
            }
        }

        evidence.insert(
            DIALOGUE_AGENT.to_string(),
            format!("{} {}", state.summary, classification.evidence_text).trim().to_string(),
        );

        let window_start = ctx.actions.len().saturating_sub(self.config.window_actions);
        let trace_id = trace_id(&ctx.request.session, ctx.turn_index);
        let template_checksums = used_templates
            .iter()
            .filter_map(|n| self.templates.get(n).ok().map(|t| (n.to_string(), t.checksum())))
            .collect();
        let backend_metadata = BackendMetadata {
            model: backend.map(|b| b.model_name().to_string()).unwrap_or_else(|| "rule-based".into()),
            latency_ms: calls.iter().map(|c| c.latency_ms).sum(),
            calls,
            template_checksums,
        };
        let policy = DialoguePolicy { kind: decision.policy, rationale };
        let trace = EvidenceTrace {
            trace: trace_id.clone(),
            dyad: ctx.request.dyad.clone(),
            session: ctx.request.session.clone(),
            task: ctx.task.clone(),
            turn_index: ctx.turn_index,
            timestamp: ctx.request.timestamp,
            input_snapshot: InputSnapshot {
                message: ctx.request.message.clone(),
                actions: ctx.actions[window_start..].to_vec(),
                model_digest: ctx.model.digest(),
                learner_model_version: lm.version,
            },
            evidence,
            dialogue_state: state.clone(),
            decision: policy.clone(),
            feedback: talk.text.clone(),
            mastery_at_turn: ctx.mastery_at_turn,
            backend_metadata,
            flags,
        };
        if !trace.is_complete() {
            return Err(Error::IncompleteTrace(vec![trace.trace.to_string()]));
        }

        let memory = DialogueMemory {
            turns: lm.dialogue.turns + 1,
            last_state: Some(state.label),
            last_policy: Some(decision.policy),
            consecutive_probes: if decision.policy == PolicyKind::ProbeUnderstanding { pctx.consecutive_probes + 1 } else { 0 },
        };
        let note = format!("{} The tutor chose {}.", state.summary, decision.policy);
        let committed_version = store.commit_with(&ctx.request.dyad, 16, |_| LearnerModelUpdate {
            dialogue: Some(memory.clone()),
            evidence: Some(note.clone()),
            ..LearnerModelUpdate::by(DIALOGUE_AGENT, ctx.request.timestamp)
        })?;

        Ok(TurnOutcome { talk_move: TalkMove { text: talk.text, policy, trace: trace_id }, trace, committed_version })
    }
}
