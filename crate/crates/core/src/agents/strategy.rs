use serde::{Deserialize, Serialize};

use super::{ground, summarize_actions};
use crate::backends::{ChatBackend, ReplySchema, TemplateSet};
use crate::model::{ActionKind, ActionRef, ProcessedAction, StrategyLabel, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub min_actions: usize,
    pub run_ratio_min: f64,
    pub streak_min: usize,
    /// Number of most recent actions examined.
    pub window: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self { min_actions: 5, run_ratio_min: 0.2, streak_min: 10, window: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyFinding {
    pub label: StrategyLabel,
    pub confidence: f64,
    pub window: (Timestamp, Timestamp),
    pub supporting_actions: Vec<ActionRef>,
    pub evidence_text: String,
    /// Set when the window held fewer than `min_actions` actions.
    #[serde(default)]
    pub window_too_small: bool,
}

/// Run ratio and longest edit streak of a window.
pub fn window_stats(window: &[ProcessedAction]) -> (usize, usize, f64, usize) {
    let edits = window.iter().filter(|a| a.category.is_edit()).count();
    let runs = window.iter().filter(|a| a.category == ActionKind::Run).count();
    let mut streak = 0;
    let mut longest = 0;
    for a in window {
        if a.category == ActionKind::Run {
            streak = 0;
        } else if a.category.is_edit() {
            streak += 1;
            longest = longest.max(streak);
        }
    }
    (edits, runs, runs as f64 / edits.max(1) as f64, longest)
}

/// Rule-based reference detector over the last `params.window` actions.
pub fn detect_strategy(actions: &[ProcessedAction], params: &StrategyParams) -> StrategyFinding {
    let start = actions.len().saturating_sub(params.window);
    let window = &actions[start..];
    let span = (
        window.first().map(ProcessedAction::timestamp).unwrap_or(0),
        window.last().map(ProcessedAction::timestamp).unwrap_or(0),
    );
    let supporting_actions: Vec<ActionRef> = window.iter().map(|a| a.source.clone()).collect();
    if window.len() < params.min_actions {
        return StrategyFinding {
            label: StrategyLabel::Unknown,
            confidence: 0.0,
            window: span,
            supporting_actions,
            evidence_text: format!(
                "Only {} actions so far ({}), fewer than the {} needed to infer a strategy.",
                window.len(),
                summarize_actions(window, 3),
                params.min_actions
            ),
            window_too_small: true,
        };
    }
    let (edits, runs, ratio, longest) = window_stats(window);
    let (label, confidence) = if ratio >= params.run_ratio_min {
        (StrategyLabel::Tinkering, (ratio / (2.0 * params.run_ratio_min)).clamp(0.5, 1.0))
    } else if longest >= params.streak_min {
        (StrategyLabel::DepthFirstEnacting, (longest as f64 / (2.0 * params.streak_min as f64)).clamp(0.5, 1.0))
    } else {
        (StrategyLabel::Unknown, 0.0)
    };
    let examples = summarize_actions(window, 4);
    let evidence_text = match label {
        StrategyLabel::Tinkering => format!(
            "The students ran the simulation {runs} times across {edits} edits (run ratio {ratio:.2}), testing between changes: {examples}."
        ),
        StrategyLabel::DepthFirstEnacting => format!(
            "The students made {longest} edits in a row without running the simulation ({runs} runs in {} actions): {examples}.",
            window.len()
        ),
        StrategyLabel::Unknown => format!(
            "No clear strategy: {runs} runs across {edits} edits, longest edit streak {longest}: {examples}."
        ),
    };
    StrategyFinding { label, confidence, window: span, supporting_actions, evidence_text, window_too_small: false }
}

/// Backend-proposed strategy label. Falls back to the rule-based finding when
/// the reply is unusable; the evidence always cites the window's actions.
pub fn detect_strategy_llm(
    actions: &[ProcessedAction],
    params: &StrategyParams,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> (StrategyFinding, Option<crate::model::CallRecord>) {
    let reference = detect_strategy(actions, params);
    if reference.window_too_small {
        return (reference, None);
    }
    let start = actions.len().saturating_sub(params.window);
    let window = &actions[start..];
    let listing: Vec<String> = window.iter().map(|a| format!("- {}", a.description)).collect();
    let Ok(template) = templates.get("strategy") else { return (reference, None) };
    let Ok(prompt) = template.render(&[("actions", listing.join("\n"))].into_iter().collect()) else {
        return (reference, None);
    };
    let schema = ReplySchema::new("strategy")
        .one_of("label", StrategyLabel::ALL.iter().map(|l| l.label()))
        .optional("confidence");
    match backend.complete(&prompt, &schema) {
        Ok(reply) => {
            let record = super::call_record("strategy", &prompt, &reply.raw, &reply.model, reply.latency_ms);
            let label = reply.field("label").and_then(StrategyLabel::parse).unwrap_or(reference.label);
            let confidence = reply
                .field("confidence")
                .and_then(|c| c.parse::<f64>().ok())
                .filter(|c| (0.0..=1.0).contains(c))
                .unwrap_or(reference.confidence);
            let supports: Vec<&str> = window.iter().map(|a| a.description.as_str()).collect();
            let evidence_text = ground(&reply.evidence_text, &supports);
            (StrategyFinding { label, confidence, evidence_text, ..reference }, Some(record))
        }
        Err(e) => {
            let raw = e.raw_reply().unwrap_or_default().to_string();
            let record = super::call_record("strategy", &prompt, &raw, backend.model_name(), 0);
            (reference, Some(record))
        }
    }
}
