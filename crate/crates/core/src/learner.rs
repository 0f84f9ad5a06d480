//! Versioned learner-model store.
//!
//! Each dyad owns one slot holding an immutable `Arc<LearnerModel>`. Writers
//! build the next snapshot off to the side and publish it with a
//! compare-and-set on the version number, so readers only ever clone a fully
//! written snapshot. A [`CommitSink`] is called inside the publish critical
//! section, which keeps the persisted commit order identical to the version
//! order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::model::{
    short_digest, DialogueStateLabel, DyadId, GapRecord, LearnerState, MasteryScore, PolicyKind,
    StrategyLabel, Timestamp,
};
use crate::{Error, Result};

/// Number of prior-version summaries a learner model keeps.
pub const HISTORY_LIMIT: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimate {
    pub label: StrategyLabel,
    pub confidence: f64,
}

/// Dialogue-derived fields written by the dialogue agent after each turn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueMemory {
    pub turns: u32,
    pub last_state: Option<DialogueStateLabel>,
    pub last_policy: Option<PolicyKind>,
    /// Consecutive PROBE_UNDERSTANDING turns not answered by a demonstration.
    pub consecutive_probes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionSummary {
    pub version: u64,
    pub at: Timestamp,
    pub author: String,
    pub learner_state: LearnerState,
    pub strategy: StrategyLabel,
    pub mastery: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerModel {
    pub dyad: DyadId,
    pub version: u64,
    pub updated_at: Timestamp,
    pub strategy: StrategyEstimate,
    pub learner_state: LearnerState,
    pub knowledge_gaps: Vec<GapRecord>,
    pub mastery: Option<MasteryScore>,
    /// Latest evidence text per authoring agent.
    pub evidence: BTreeMap<String, String>,
    pub dialogue: DialogueMemory,
    /// Summaries of prior versions, oldest first, at most [`HISTORY_LIMIT`].
    pub history: VecDeque<VersionSummary>,
}

impl LearnerModel {
    fn initial(dyad: DyadId) -> Self {
        Self {
            dyad,
            version: 0,
            updated_at: 0,
            strategy: StrategyEstimate { label: StrategyLabel::Unknown, confidence: 0.0 },
            learner_state: LearnerState::Unknown,
            knowledge_gaps: Vec::new(),
            mastery: None,
            evidence: BTreeMap::new(),
            dialogue: DialogueMemory::default(),
            history: VecDeque::new(),
        }
    }

    pub fn mastery_value(&self) -> f64 {
        self.mastery.as_ref().map(|m| m.value).unwrap_or(0.0)
    }

    /// Checksum over the whole snapshot; a reader can detect a torn write by
    /// recomputing it.
    pub fn digest(&self) -> String {
        short_digest(&serde_json::to_vec(self).expect("learner model serializes"))
    }

    fn summary(&self, author: &str) -> VersionSummary {
        VersionSummary {
            version: self.version,
            at: self.updated_at,
            author: author.to_string(),
            learner_state: self.learner_state,
            strategy: self.strategy.label,
            mastery: self.mastery.as_ref().map(|m| m.value),
        }
    }
}

/// A partial write. Unset fields keep their previous value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerModelUpdate {
    /// Version the writer read before building the update. `None` applies the
    /// update unconditionally on top of whatever is newest.
    pub base_version: Option<u64>,
    pub at: Timestamp,
    pub author: String,
    pub strategy: Option<StrategyEstimate>,
    pub learner_state: Option<LearnerState>,
    pub knowledge_gaps: Option<Vec<GapRecord>>,
    pub mastery: Option<MasteryScore>,
    /// Stored under `author` in the evidence map.
    pub evidence: Option<String>,
    pub dialogue: Option<DialogueMemory>,
}

impl LearnerModelUpdate {
    pub fn by(author: impl Into<String>, at: Timestamp) -> Self {
        Self { author: author.into(), at, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.author.trim().is_empty() {
            return Err(Error::Invalid("update author is empty".into()));
        }
        if let Some(s) = &self.strategy {
            if !(0.0..=1.0).contains(&s.confidence) {
                return Err(Error::Invalid(format!("strategy confidence {} outside [0,1]", s.confidence)));
            }
        }
        if let Some(m) = &self.mastery {
            if !(0.0..=1.0).contains(&m.value) {
                return Err(Error::Invalid(format!("mastery {} outside [0,1]", m.value)));
            }
        }
        if let Some(gaps) = &self.knowledge_gaps {
            for g in gaps {
                if g.observed.as_deref() == Some(g.expected.as_str()) {
                    return Err(Error::Invalid(format!("gap {} has expected == observed", g.component)));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, prev: &LearnerModel, history_limit: usize) -> LearnerModel {
        let mut next = prev.clone();
        if prev.version > 0 {
            next.history.push_back(prev.summary(&self.author));
            while next.history.len() > history_limit {
                next.history.pop_front();
            }
        }
        next.version = prev.version + 1;
        next.updated_at = self.at.max(prev.updated_at);
        if let Some(s) = self.strategy {
            next.strategy = s;
        }
        if let Some(s) = self.learner_state {
            next.learner_state = s;
        }
        if let Some(g) = &self.knowledge_gaps {
            next.knowledge_gaps = g.clone();
        }
        if let Some(m) = &self.mastery {
            next.mastery = Some(m.clone());
        }
        if let Some(e) = &self.evidence {
            next.evidence.insert(self.author.clone(), e.clone());
        }
        if let Some(d) = &self.dialogue {
            next.dialogue = d.clone();
        }
        next
    }
}

/// Receives every commit before it becomes visible. Returning an error aborts
/// the commit.
pub trait CommitSink: Send + Sync {
    fn committed(&self, model: &LearnerModel, update: &LearnerModelUpdate) -> Result<()>;
}

#[derive(Default)]
struct Slot {
    current: Mutex<Option<Arc<LearnerModel>>>,
}

pub struct LearnerStore {
    slots: RwLock<HashMap<DyadId, Arc<Slot>>>,
    history_limit: usize,
    sink: RwLock<Option<Arc<dyn CommitSink>>>,
}

impl Default for LearnerStore {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for LearnerStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearnerStore").field("dyads", &self.slots.read().len()).finish()
    }
}

impl LearnerStore {
    pub fn new() -> Self {
        Self::with_history_limit(HISTORY_LIMIT)
    }

    pub fn with_history_limit(history_limit: usize) -> Self {
        Self { slots: RwLock::new(HashMap::new()), history_limit, sink: RwLock::new(None) }
    }

    pub fn set_sink(&self, sink: Arc<dyn CommitSink>) {
        *self.sink.write() = Some(sink);
    }

    /// Makes a dyad known to the store. Reads still fail with `UnknownDyad`
    /// until the first commit lands.
    pub fn register(&self, dyad: &DyadId) {
        self.slots.write().entry(dyad.clone()).or_default();
    }

    pub fn is_registered(&self, dyad: &DyadId) -> bool {
        self.slots.read().contains_key(dyad)
    }

    fn slot(&self, dyad: &DyadId) -> Result<Arc<Slot>> {
        self.slots.read().get(dyad).cloned().ok_or_else(|| Error::UnknownDyad(dyad.clone()))
    }

    /// Latest committed snapshot.
    pub fn read(&self, dyad: &DyadId) -> Result<Arc<LearnerModel>> {
        let slot = self.slot(dyad)?;
        let snap = slot.current.lock().clone();
        snap.ok_or_else(|| Error::UnknownDyad(dyad.clone()))
    }

    /// Like [`read`](Self::read), but a registered dyad with no commits yet
    /// reads as the version-0 initial model.
    pub fn read_or_initial(&self, dyad: &DyadId) -> Result<Arc<LearnerModel>> {
        let slot = self.slot(dyad)?;
        let snap = slot.current.lock().clone();
        Ok(snap.unwrap_or_else(|| Arc::new(LearnerModel::initial(dyad.clone()))))
    }

    /// Current version, 0 for a registered dyad with no commits.
    pub fn version(&self, dyad: &DyadId) -> Result<u64> {
        let slot = self.slot(dyad)?;
        let v = slot.current.lock().as_ref().map(|m| m.version).unwrap_or(0);
        Ok(v)
    }

    pub fn commit(&self, dyad: &DyadId, update: LearnerModelUpdate) -> Result<u64> {
        update.validate()?;
        let slot = self.slot(dyad)?;
        loop {
            let base = slot.current.lock().clone();
            let base_version = base.as_ref().map(|m| m.version).unwrap_or(0);
            if let Some(expected) = update.base_version {
                if expected != base_version {
                    return Err(Error::StaleWrite { dyad: dyad.clone(), base: expected, current: base_version });
                }
            }
            let prev = match &base {
                Some(m) => (**m).clone(),
                None => LearnerModel::initial(dyad.clone()),
            };
            let next = update.apply(&prev, self.history_limit);

            let mut guard = slot.current.lock();
            let now = guard.as_ref().map(|m| m.version).unwrap_or(0);
            if now != base_version {
                if update.base_version.is_some() {
                    return Err(Error::StaleWrite {
                        dyad: dyad.clone(),
                        base: base_version,
                        current: now,
                    });
                }
                continue;
            }
            if let Some(sink) = self.sink.read().as_ref() {
                sink.committed(&next, &update)?;
            }
            let version = next.version;
            *guard = Some(Arc::new(next));
            return Ok(version);
        }
    }

    /// Read-modify-write with optimistic retries. `build` sees the latest
    /// snapshot (or `None` before the first commit) and returns the update;
    /// its `base_version` is filled in automatically.
    pub fn commit_with<F>(&self, dyad: &DyadId, max_attempts: usize, mut build: F) -> Result<u64>
    where
        F: FnMut(Option<&LearnerModel>) -> LearnerModelUpdate,
    {
        let mut last_err = None;
        for _ in 0..max_attempts.max(1) {
            let snap = match self.read(dyad) {
                Ok(s) => Some(s),
                Err(Error::UnknownDyad(_)) if self.is_registered(dyad) => None,
                Err(e) => return Err(e),
            };
            let mut update = build(snap.as_deref());
            update.base_version = Some(snap.as_ref().map(|m| m.version).unwrap_or(0));
            match self.commit(dyad, update) {
                Ok(v) => return Ok(v),
                Err(e @ Error::StaleWrite { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Re-applies a recorded commit during recovery, checking that it lands
    /// on the recorded version with the recorded digest. The sink is not called.
    pub fn replay(&self, dyad: &DyadId, update: &LearnerModelUpdate, version: u64, digest: &str) -> Result<()> {
        self.register(dyad);
        let slot = self.slot(dyad)?;
        let mut guard = slot.current.lock();
        let prev = match guard.as_ref() {
            Some(m) => (**m).clone(),
            None => LearnerModel::initial(dyad.clone()),
        };
        if prev.version + 1 != version {
            return Err(Error::Persistence(format!(
                "replay gap for {dyad}: have v{}, record is v{version}",
                prev.version
            )));
        }
        let next = update.apply(&prev, self.history_limit);
        let got = next.digest();
        if got != digest {
            return Err(Error::Persistence(format!(
                "replay digest mismatch for {dyad} v{version}: {got} != {digest}"
            )));
        }
        *guard = Some(Arc::new(next));
        Ok(())
    }

    /// Installs a snapshot loaded from disk.
    pub fn restore(&self, model: LearnerModel) {
        self.register(&model.dyad);
        let slot = self.slot(&model.dyad).expect("registered above");
        *slot.current.lock() = Some(Arc::new(model));
    }

    pub fn dyads(&self) -> Vec<DyadId> {
        let mut v: Vec<_> = self.slots.read().keys().cloned().collect();
        v.sort();
        v
    }
}
