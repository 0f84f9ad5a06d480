use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::learner::LearnerModel;
use crate::model::{DialogueState, DialogueStateLabel, LearnerState, PolicyKind};
use crate::{Error, Result};

pub const POLICY_TABLE_SCHEMA_VERSION: u32 = 1;

/// One rule. Empty lists and unset bounds match anything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<DialogueStateLabel>,
    /// Inclusive lower bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mastery_min: Option<f64>,
    /// Exclusive upper bound, except that 1.0 also admits mastery 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mastery_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub learner_states: Vec<LearnerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_gaps: Option<bool>,
    pub policy: PolicyKind,
}

impl PolicyRule {
    pub fn is_unconditional(&self) -> bool {
        self.states.is_empty()
            && self.mastery_min.is_none()
            && self.mastery_max.is_none()
            && self.learner_states.is_empty()
            && self.has_gaps.is_none()
    }

    pub fn matches(&self, ctx: &PolicyContext) -> bool {
        (self.states.is_empty() || self.states.contains(&ctx.state))
            && self.mastery_min.is_none_or(|lo| ctx.mastery >= lo)
            && self.mastery_max.is_none_or(|hi| ctx.mastery < hi || (hi >= 1.0 && ctx.mastery >= 1.0))
            && (self.learner_states.is_empty() || self.learner_states.contains(&ctx.learner_state))
            && self.has_gaps.is_none_or(|g| g == ctx.has_gaps)
    }
}

/// Forces SUGGEST_ACTION after a run of probes that were not answered with a
/// demonstration of understanding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionDamper {
    pub enabled: bool,
    pub max_consecutive_probes: u32,
}

impl Default for RepetitionDamper {
    fn default() -> Self {
        Self { enabled: false, max_consecutive_probes: 3 }
    }
}

/// What a rule can see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyContext {
    pub state: DialogueStateLabel,
    pub mastery: f64,
    pub learner_state: LearnerState,
    pub has_gaps: bool,
    /// Consecutive unanswered probes, counting the turn being decided.
    pub consecutive_probes: u32,
}

impl PolicyContext {
    pub fn from_model(state: DialogueStateLabel, lm: &LearnerModel) -> Self {
        Self {
            state,
            mastery: lm.mastery_value(),
            learner_state: lm.learner_state,
            has_gaps: !lm.knowledge_gaps.is_empty(),
            consecutive_probes: if state == DialogueStateLabel::DemonstratesUnderstanding {
                0
            } else {
                lm.dialogue.consecutive_probes
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRuleTable {
    pub schema_version: u32,
    pub rules: Vec<PolicyRule>,
    #[serde(default)]
    pub damper: RepetitionDamper,
}

/// Outcome of a rule-table decision.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleDecision {
    pub policy: PolicyKind,
    pub rule_id: String,
    pub damped: bool,
}

const DEFAULT_TABLE: &str = include_str!("../../fixtures/policy_rules.json");

impl PolicyRuleTable {
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("bundled rule table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A table is valid when its last rule is unconditional (so it is total),
    /// rule ids are unique and mastery bounds are ordered within `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != POLICY_TABLE_SCHEMA_VERSION {
            return Err(Error::Invalid(format!("unsupported rule table schema_version {}", self.schema_version)));
        }
        let Some(last) = self.rules.last() else {
            return Err(Error::Invalid("rule table has no rules".into()));
        };
        if !last.is_unconditional() {
            return Err(Error::Invalid(format!("last rule {} must be an unconditional default", last.id)));
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.rules {
            if r.id.trim().is_empty() || !ids.insert(r.id.as_str()) {
                return Err(Error::Invalid(format!("rule id {:?} is empty or repeated", r.id)));
            }
            for b in [r.mastery_min, r.mastery_max].into_iter().flatten() {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::Invalid(format!("rule {} has mastery bound {b} outside [0,1]", r.id)));
                }
            }
            if let (Some(lo), Some(hi)) = (r.mastery_min, r.mastery_max) {
                if lo >= hi {
                    return Err(Error::Invalid(format!("rule {} has empty mastery range [{lo}, {hi})", r.id)));
                }
            }
        }
        if self.damper.enabled && self.damper.max_consecutive_probes == 0 {
            return Err(Error::Invalid("damper threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rule table serializes")
    }

    /// First matching rule, then the damper.
    pub fn decide(&self, ctx: &PolicyContext) -> RuleDecision {
        let rule = self.rules.iter().find(|r| r.matches(ctx)).expect("validated table ends with a default rule");
        if self.damper.enabled
            && rule.policy == PolicyKind::ProbeUnderstanding
            && ctx.consecutive_probes >= self.damper.max_consecutive_probes
        {
            return RuleDecision { policy: PolicyKind::SuggestAction, rule_id: rule.id.clone(), damped: true };
        }
        RuleDecision { policy: rule.policy, rule_id: rule.id.clone(), damped: false }
    }

    /// Policies some matching rule would choose. A backend proposal outside
    /// this set is vetoed.
    pub fn admissible(&self, ctx: &PolicyContext) -> Vec<PolicyKind> {
        let mut out: Vec<PolicyKind> = self.rules.iter().filter(|r| r.matches(ctx)).map(|r| r.policy).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn rule(&self, id: &str) -> Option<&PolicyRule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

/// Decision text naming the state, the mastery consulted and the learner
/// state. `focus` is the gap the reply should address, if any.
pub fn rationale(
    state: &DialogueState,
    ctx: &PolicyContext,
    decision: &RuleDecision,
    strategy: &str,
    focus: Option<&str>,
    table: &PolicyRuleTable,
) -> String {
    let why = match decision.policy {
        PolicyKind::ProbeUnderstanding => "probe their understanding with a question before offering any help",
        PolicyKind::SuggestAction => "suggest one concrete action to take in the workspace",
        PolicyKind::PushLimit => "push them past the current task with a harder challenge",
    };
    let rule = table
        .rule(&decision.rule_id)
        .map(|r| if r.description.is_empty() { r.id.clone() } else { format!("{} ({})", r.id, r.description) })
        .unwrap_or_else(|| decision.rule_id.clone());
    let mut text = format!(
        "Dialogue state {}: {}. Task mastery is {:.2}, the learner state is {} and the strategy is {}. Rule {rule} selects {}, so the tutor should {why}.",
        state.label,
        state.summary.trim_end_matches('.'),
        ctx.mastery,
        ctx.learner_state.label(),
        strategy,
        decision.policy,
    );
    if decision.damped {
        text.push_str(&format!(
            " The last {} probes went unanswered, so the repetition damper switches to {}.",
            ctx.consecutive_probes,
            PolicyKind::SuggestAction
        ));
    }
    match focus {
        Some(f) => text.push_str(&format!(" Focus on the {f} component.")),
        None if ctx.has_gaps => {}
        None => text.push_str(" No knowledge gaps remain."),
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(state: DialogueStateLabel, mastery: f64, has_gaps: bool) -> PolicyContext {
        PolicyContext { state, mastery, learner_state: LearnerState::OnTrack, has_gaps, consecutive_probes: 0 }
    }

    #[test]
    fn reference_decisions() {
        let t = PolicyRuleTable::bundled();
        let d = |s, m, g| t.decide(&ctx(s, m, g)).policy;
        assert_eq!(d(DialogueStateLabel::RequestsSolution, 0.2, true), PolicyKind::ProbeUnderstanding);
        assert_eq!(d(DialogueStateLabel::DemonstratesUnderstanding, 0.9, false), PolicyKind::PushLimit);
        assert_eq!(d(DialogueStateLabel::ExpressesConfusion, 0.5, true), PolicyKind::SuggestAction);
    }

    #[test]
    fn tables_without_default_are_rejected() {
        let mut t = PolicyRuleTable::bundled();
        t.rules.pop();
        assert!(t.validate().is_err());
        let mut dup = PolicyRuleTable::bundled();
        let first = dup.rules[0].clone();
        dup.rules.insert(1, first);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn damper_forces_suggest() {
        let mut t = PolicyRuleTable::bundled();
        let mut c = ctx(DialogueStateLabel::RequestsSolution, 0.1, true);
        c.consecutive_probes = 3;
        assert_eq!(t.decide(&c).policy, PolicyKind::ProbeUnderstanding);
        t.damper.enabled = true;
        let d = t.decide(&c);
        assert_eq!((d.policy, d.damped), (PolicyKind::SuggestAction, true));
    }

    #[test]
    fn full_mastery_hits_top_band() {
        let t = PolicyRuleTable::bundled();
        assert_eq!(t.decide(&ctx(DialogueStateLabel::DemonstratesUnderstanding, 1.0, false)).policy, PolicyKind::PushLimit);
    }
}
