//! Shared domain types.
//!
//! Every type here serializes to the JSON layout documented in the book's
//! schema chapter. Enum variants use `SCREAMING_SNAKE_CASE` spellings and
//! field names are `snake_case`. Those spellings are normative for the
//! store, the HTTP API and every fixture file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Milliseconds since the Unix epoch.
pub type Timestamp = u64;

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            /// Builds the identifier, rejecting empty strings.
            pub fn new(value: impl Into<String>) -> Result<Self, crate::Error> {
                let value = value.into();
                if value.trim().is_empty() {
                    return Err(crate::Error::Invalid(format!(
                        "{} must be non-empty",
                        stringify!($name)
                    )));
                }
                Ok(Self(value))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = crate::Error;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = crate::Error;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }
    };
}

opaque_id!(
    /// A student pair sharing one computer; the unit of analysis.
    DyadId
);
opaque_id!(SessionId);
opaque_id!(TaskId);
opaque_id!(TraceId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Add,
    Edit,
    Remove,
    Run,
    Other,
}

impl ActionKind {
    /// Edits are the block-changing actions: add, edit and remove.
    pub fn is_edit(self) -> bool {
        matches!(self, ActionKind::Add | ActionKind::Edit | ActionKind::Remove)
    }
}

/// One raw environment event as it appears in the activity log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedAction {
    /// Client-supplied idempotency key; duplicates within a session are dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    pub timestamp: Timestamp,
    pub dyad: DyadId,
    pub session: SessionId,
    pub task: TaskId,
    /// Environment-native opcode, e.g. `set_block1234_vel_4`.
    pub raw: String,
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl LoggedAction {
    pub fn validate(&self) -> Result<(), crate::Error> {
        if self.raw.trim().is_empty() {
            return Err(crate::Error::Invalid("action raw opcode is empty".into()));
        }
        Ok(())
    }
}

/// Points back at the logged action a processed action was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRef {
    pub session: SessionId,
    /// Position of the action in its session stream.
    pub index: usize,
    pub timestamp: Timestamp,
    pub raw: String,
}

/// A logged action translated into a human- and LLM-readable description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedAction {
    pub source: ActionRef,
    pub description: String,
    pub category: ActionKind,
    #[serde(default)]
    pub concept_tags: Vec<String>,
    /// Set when no translation pattern matched and the raw opcode was kept.
    #[serde(default)]
    pub untranslatable: bool,
}

impl ProcessedAction {
    pub fn timestamp(&self) -> Timestamp {
        self.source.timestamp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockRole {
    VarInit,
    VarUpdate,
    Loop,
    Conditional,
    Event,
    Other,
}

impl BlockRole {
    pub const ALL: [BlockRole; 6] = [
        BlockRole::VarInit,
        BlockRole::VarUpdate,
        BlockRole::Loop,
        BlockRole::Conditional,
        BlockRole::Event,
        BlockRole::Other,
    ];

    /// Suffix used in canonical component keys (`velocity-init`, `loop`, ...).
    pub fn key_suffix(self) -> &'static str {
        match self {
            BlockRole::VarInit => "init",
            BlockRole::VarUpdate => "update",
            BlockRole::Loop => "loop",
            BlockRole::Conditional => "conditional",
            BlockRole::Event => "event",
            BlockRole::Other => "other",
        }
    }

    pub fn from_key_suffix(suffix: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.key_suffix() == suffix)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: String,
    pub role: BlockRole,
    pub expression: String,
}

/// The code blocks currently on screen for a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelState {
    pub task: TaskId,
    pub blocks: Vec<Block>,
    pub captured_at: Timestamp,
}

impl ModelState {
    pub fn empty(task: TaskId, captured_at: Timestamp) -> Self {
        Self { task, blocks: Vec::new(), captured_at }
    }

    pub fn validate(&self) -> Result<(), crate::Error> {
        let mut seen = BTreeSet::new();
        for b in &self.blocks {
            if !seen.insert(b.block_id.as_str()) {
                return Err(crate::Error::Invalid(format!("duplicate block id {}", b.block_id)));
            }
        }
        Ok(())
    }
}

/// Order- and formatting-normalized student model: component key to
/// normalized expression.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalModel {
    pub components: BTreeMap<String, String>,
}

impl CanonicalModel {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.components.get(key).map(String::as_str)
    }

    /// Short stable hash of the component map.
    pub fn digest(&self) -> String {
        short_digest(&serde_json::to_vec(&self.components).expect("string map serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryScore {
    pub task: TaskId,
    pub value: f64,
    pub criteria_met: BTreeSet<String>,
    pub at: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeltaDirection {
    Advance,
    Deteriorate,
    Neutral,
}

/// Change in mastery caused by one action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryDelta {
    pub action: ActionRef,
    pub before: MasteryScore,
    pub after: MasteryScore,
    pub direction: DeltaDirection,
}

// Strategy, learner-state and dialogue-state vocabularies are closed stand-ins.
// New labels can be appended; existing spellings must not change.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyLabel {
    /// Systematic trial-and-error: frequent testing between edits.
    Tinkering,
    /// Building without periodic testing.
    DepthFirstEnacting,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LearnerState {
    OnTrack,
    Debugging,
    Struggling,
    Idle,
    Unknown,
}

impl LearnerState {
    pub const ALL: [LearnerState; 5] = [
        LearnerState::OnTrack,
        LearnerState::Debugging,
        LearnerState::Struggling,
        LearnerState::Idle,
        LearnerState::Unknown,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LearnerState::OnTrack => "ON_TRACK",
            LearnerState::Debugging => "DEBUGGING",
            LearnerState::Struggling => "STRUGGLING",
            LearnerState::Idle => "IDLE",
            LearnerState::Unknown => "UNKNOWN",
        }
    }
}

impl StrategyLabel {
    pub const ALL: [StrategyLabel; 3] =
        [StrategyLabel::Tinkering, StrategyLabel::DepthFirstEnacting, StrategyLabel::Unknown];

    pub fn label(self) -> &'static str {
        match self {
            StrategyLabel::Tinkering => "TINKERING",
            StrategyLabel::DepthFirstEnacting => "DEPTH_FIRST_ENACTING",
            StrategyLabel::Unknown => "UNKNOWN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "TINKERING" => Some(Self::Tinkering),
            "DEPTH_FIRST_ENACTING" => Some(Self::DepthFirstEnacting),
            "UNKNOWN" => Some(Self::Unknown),
            _ => None,
        }
    }
}

impl LearnerState {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ON_TRACK" => Some(Self::OnTrack),
            "DEBUGGING" => Some(Self::Debugging),
            "STRUGGLING" => Some(Self::Struggling),
            "IDLE" => Some(Self::Idle),
            "UNKNOWN" => Some(Self::Unknown),
            _ => None,
        }
    }
}

/// One component of the student's model that diverges from the expert reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRecord {
    pub component: String,
    pub expected: String,
    /// `None` when the component is missing entirely.
    pub observed: Option<String>,
    #[serde(default)]
    pub retrieved_knowledge: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DialogueStateLabel {
    DemonstratesUnderstanding,
    RequestsSolution,
    AsksConceptualQuestion,
    ExpressesConfusion,
    ReportsProgress,
    Other,
}

impl DialogueStateLabel {
    pub const ALL: [DialogueStateLabel; 6] = [
        DialogueStateLabel::DemonstratesUnderstanding,
        DialogueStateLabel::RequestsSolution,
        DialogueStateLabel::AsksConceptualQuestion,
        DialogueStateLabel::ExpressesConfusion,
        DialogueStateLabel::ReportsProgress,
        DialogueStateLabel::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::DemonstratesUnderstanding => "DEMONSTRATES_UNDERSTANDING",
            Self::RequestsSolution => "REQUESTS_SOLUTION",
            Self::AsksConceptualQuestion => "ASKS_CONCEPTUAL_QUESTION",
            Self::ExpressesConfusion => "EXPRESSES_CONFUSION",
            Self::ReportsProgress => "REPORTS_PROGRESS",
            Self::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_uppercase();
        Self::ALL.into_iter().find(|l| l.label() == norm)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub label: DialogueStateLabel,
    pub summary: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyKind {
    ProbeUnderstanding,
    SuggestAction,
    PushLimit,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] =
        [PolicyKind::ProbeUnderstanding, PolicyKind::SuggestAction, PolicyKind::PushLimit];

    pub fn label(self) -> &'static str {
        match self {
            Self::ProbeUnderstanding => "PROBE_UNDERSTANDING",
            Self::SuggestAction => "SUGGEST_ACTION",
            Self::PushLimit => "PUSH_LIMIT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_uppercase();
        Self::ALL.into_iter().find(|p| p.label() == norm)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl fmt::Display for DialogueStateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePolicy {
    pub kind: PolicyKind,
    pub rationale: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TalkMove {
    pub text: String,
    pub policy: DialoguePolicy,
    pub trace: TraceId,
}

/// Link-1 input: what the agent could see when the turn started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSnapshot {
    pub message: String,
    pub actions: Vec<ProcessedAction>,
    pub model_digest: String,
    pub learner_model_version: u64,
}

impl InputSnapshot {
    /// Concatenated processed-action descriptions; the "log text" of Link 1.
    pub fn log_text(&self) -> String {
        self.actions.iter().map(|a| a.description.as_str()).collect::<Vec<_>>().join("; ")
    }
}

/// Audit record of one reasoning-backend call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: String,
    pub prompt_checksum: String,
    pub raw_reply: String,
    pub model: String,
    pub latency_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub model: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub calls: Vec<CallRecord>,
    /// Template name to checksum for every prompt template used in the turn.
    #[serde(default)]
    pub template_checksums: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceFlag {
    MalformedBackendOutput,
    BackendFailure,
    GuardrailRegenerated,
    FallbackMove,
    LlmPolicyVetoed,
}

/// The per-turn chain input snapshot -> evidence -> decision -> feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTrace {
    pub trace: TraceId,
    pub dyad: DyadId,
    pub session: SessionId,
    pub task: TaskId,
    pub turn_index: u32,
    pub timestamp: Timestamp,
    pub input_snapshot: InputSnapshot,
    /// Agent name to evidence text.
    pub evidence: BTreeMap<String, String>,
    pub dialogue_state: DialogueState,
    pub decision: DialoguePolicy,
    pub feedback: String,
    /// Mastery of the latest model state at or before the turn.
    #[serde(default)]
    pub mastery_at_turn: Option<f64>,
    pub backend_metadata: BackendMetadata,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<TraceFlag>,
}

impl EvidenceTrace {
    /// Evidence texts joined in agent-name order.
    pub fn evidence_text(&self) -> String {
        self.evidence.values().map(String::as_str).collect::<Vec<_>>().join(" ")
    }

    /// Names of the links that are missing or empty. Empty means complete.
    pub fn missing_links(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        let input = &self.input_snapshot;
        if input.message.trim().is_empty() && input.actions.is_empty() {
            missing.push("input_snapshot");
        }
        if self.evidence.values().all(|e| e.trim().is_empty()) {
            missing.push("evidence");
        }
        if self.decision.rationale.trim().is_empty() || self.dialogue_state.summary.trim().is_empty()
        {
            missing.push("decision");
        }
        if self.feedback.trim().is_empty() {
            missing.push("feedback");
        }
        missing
    }

    pub fn is_complete(&self) -> bool {
        self.missing_links().is_empty()
    }
}

/// Truncated hex SHA-256, used for digests recorded in traces and reports.
pub fn short_digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    hex::encode(&full[..8])
}

/// Full hex SHA-256.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_reject_empty() {
        assert!(DyadId::new("").is_err());
        assert!(DyadId::new("  ").is_err());
        assert!(serde_json::from_str::<TaskId>("\"\"").is_err());
        assert_eq!(DyadId::new("d1").unwrap().as_str(), "d1");
    }

    #[test]
    fn enum_spellings() {
        assert_eq!(
            serde_json::to_string(&DialogueStateLabel::DemonstratesUnderstanding).unwrap(),
            "\"DEMONSTRATES_UNDERSTANDING\""
        );
        assert_eq!(serde_json::to_string(&PolicyKind::PushLimit).unwrap(), "\"PUSH_LIMIT\"");
        assert_eq!(serde_json::to_string(&BlockRole::VarInit).unwrap(), "\"VAR_INIT\"");
        assert_eq!(
            serde_json::to_string(&StrategyLabel::DepthFirstEnacting).unwrap(),
            "\"DEPTH_FIRST_ENACTING\""
        );
        for l in DialogueStateLabel::ALL {
            assert_eq!(DialogueStateLabel::parse(l.label()), Some(l));
        }
        assert_eq!(StrategyLabel::parse("depth-first_enacting"), Some(StrategyLabel::DepthFirstEnacting));
    }

    #[test]
    fn duplicate_block_ids_rejected() {
        let task = TaskId::new("t").unwrap();
        let b = Block { block_id: "b1".into(), role: BlockRole::Loop, expression: "x".into() };
        let m = ModelState { task, blocks: vec![b.clone(), b], captured_at: 0 };
        assert!(m.validate().is_err());
    }
}
