use serde::{Deserialize, Serialize};

use super::strategy::StrategyFinding;
use super::{ground, summarize_actions};
use crate::backends::{ChatBackend, ReplySchema, TemplateSet};
use crate::model::{
    ActionKind, CallRecord, CanonicalModel, DeltaDirection, LearnerState, MasteryDelta, ProcessedAction,
    StrategyLabel, Timestamp,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentParams {
    /// No action for longer than this means IDLE.
    pub idle_timeout_ms: u64,
    /// Span over which a lack of mastery gain counts as a stall.
    pub stall_window_ms: u64,
    /// Number of most recent actions whose deltas are weighed.
    pub recent_actions: usize,
    /// RUN count in the recent actions that marks active debugging.
    pub debug_runs_min: usize,
}

impl Default for AssessmentParams {
    fn default() -> Self {
        Self { idle_timeout_ms: 120_000, stall_window_ms: 300_000, recent_actions: 10, debug_runs_min: 2 }
    }
}

/// Inputs the assessment triangulates, all read from committed state.
#[derive(Clone, Debug)]
pub struct AssessmentInput<'a> {
    pub model: &'a CanonicalModel,
    pub strategy: &'a StrategyFinding,
    pub actions: &'a [ProcessedAction],
    /// Aligned with `actions`.
    pub deltas: &'a [MasteryDelta],
    /// Prior learner states, oldest first.
    pub prior_states: &'a [LearnerState],
    pub now: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentFinding {
    pub label: LearnerState,
    pub prior_state: Option<LearnerState>,
    /// Model digest, strategy and number of prior states consulted.
    pub inputs_digest: String,
    pub evidence_text: String,
}

fn digest(input: &AssessmentInput<'_>) -> String {
    format!("{}|{}|{}", input.model.digest(), input.strategy.label.label(), input.prior_states.len())
}

/// Rule-based reference assessment. Rules are tried in order:
///
/// 1. no action for `idle_timeout_ms` gives IDLE;
/// 2. more recent DETERIORATE than ADVANCE deltas with repeated RUNs gives
///    DEBUGGING, whatever the strategy;
/// 3. no mastery gain for `stall_window_ms` while depth-first enacting gives
///    STRUGGLING;
/// 4. recent ADVANCE deltas, at least as many as DETERIORATE, give ON_TRACK;
/// 5. otherwise UNKNOWN.
pub fn assess_learner_state(input: &AssessmentInput<'_>, params: &AssessmentParams) -> AssessmentFinding {
    let prior_state = input.prior_states.last().copied();
    let inputs_digest = digest(input);
    let finding = |label: LearnerState, evidence_text: String| AssessmentFinding {
        label,
        prior_state,
        inputs_digest: inputs_digest.clone(),
        evidence_text,
    };

    let Some(last) = input.actions.last() else {
        return finding(LearnerState::Unknown, "No actions have been logged yet, so the learner state is unknown.".into());
    };
    let idle_for = input.now.saturating_sub(last.timestamp());
    if idle_for > params.idle_timeout_ms {
        return finding(
            LearnerState::Idle,
            format!("No actions for {} seconds; the last action was: {}.", idle_for / 1000, last.description),
        );
    }

    let start = input.actions.len().saturating_sub(params.recent_actions);
    let recent = &input.actions[start..];
    let recent_deltas = &input.deltas[start.min(input.deltas.len())..];
    let advances = recent_deltas.iter().filter(|d| d.direction == DeltaDirection::Advance).count();
    let setbacks = recent_deltas.iter().filter(|d| d.direction == DeltaDirection::Deteriorate).count();
    let runs = recent.iter().filter(|a| a.category == ActionKind::Run).count();

    if setbacks > advances && runs >= params.debug_runs_min {
        let lowered: Vec<&ProcessedAction> = recent
            .iter()
            .zip(recent_deltas)
            .filter(|(_, d)| d.direction == DeltaDirection::Deteriorate)
            .map(|(a, _)| a)
            .collect();
        let examples: Vec<&str> = lowered.iter().take(3).map(|a| a.description.as_str()).collect();
        return finding(
            LearnerState::Debugging,
            format!(
                "{setbacks} recent actions lowered mastery ({}) against {advances} that raised it, and the students ran the simulation {runs} times.",
                examples.join("; ")
            ),
        );
    }

    if input.strategy.label == StrategyLabel::DepthFirstEnacting {
        let since = input.now.saturating_sub(params.stall_window_ms);
        let stalled_span = input.actions.first().is_some_and(|a| a.timestamp() <= since);
        let gained = input
            .deltas
            .iter()
            .zip(input.actions)
            .any(|(d, a)| a.timestamp() >= since && d.direction == DeltaDirection::Advance);
        if stalled_span && !gained {
            return finding(
                LearnerState::Struggling,
                format!(
                    "Mastery has not risen in the last {} minutes while the students keep building without testing: {}.",
                    params.stall_window_ms / 60_000,
                    summarize_actions(recent, 3)
                ),
            );
        }
    }

    if advances > 0 && advances >= setbacks {
        let raised: Vec<&str> = recent
            .iter()
            .zip(recent_deltas)
            .filter(|(_, d)| d.direction == DeltaDirection::Advance)
            .take(3)
            .map(|(a, _)| a.description.as_str())
            .collect();
        return finding(
            LearnerState::OnTrack,
            format!("{advances} recent actions raised mastery ({}), so the students are on track.", raised.join("; ")),
        );
    }

    finding(
        LearnerState::Unknown,
        format!("Recent actions neither raised nor lowered mastery: {}.", summarize_actions(recent, 3)),
    )
}

/// Backend-proposed learner state with the rule-based finding as fallback.
pub fn assess_learner_state_llm(
    input: &AssessmentInput<'_>,
    params: &AssessmentParams,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> (AssessmentFinding, Option<CallRecord>) {
    let reference = assess_learner_state(input, params);
    let Ok(template) = templates.get("assessment") else { return (reference, None) };
    let model_text: Vec<String> = input.model.components.iter().map(|(k, v)| format!("{k}: {v}")).collect();
    let history: Vec<String> = input
        .deltas
        .iter()
        .zip(input.actions)
        .rev()
        .take(params.recent_actions)
        .map(|(d, a)| format!("{} -> {:?}", a.description, d.direction))
        .chain(input.prior_states.iter().rev().take(5).map(|s| format!("prior state {}", s.label())))
        .collect();
    let values = [
        ("model", model_text.join("\n")),
        ("strategy", format!("{} ({})", input.strategy.label.label(), input.strategy.evidence_text)),
        ("history", history.join("\n")),
    ];
    let Ok(prompt) = template.render(&values.into_iter().collect()) else { return (reference, None) };
    let schema = ReplySchema::new("assessment").one_of("label", LearnerState::ALL.iter().map(|l| l.label()));
    match backend.complete(&prompt, &schema) {
        Ok(reply) => {
            let record = super::call_record("assessment", &prompt, &reply.raw, &reply.model, reply.latency_ms);
            let label = reply.field("label").and_then(LearnerState::parse).unwrap_or(reference.label);
            let supports: Vec<&str> = input.actions.iter().rev().take(params.recent_actions).map(|a| a.description.as_str()).collect();
            let evidence_text = ground(&reply.evidence_text, &supports);
            (AssessmentFinding { label, evidence_text, ..reference }, Some(record))
        }
        Err(e) => {
            let record = super::call_record("assessment", &prompt, e.raw_reply().unwrap_or_default(), backend.model_name(), 0);
            (reference, Some(record))
        }
    }
}
