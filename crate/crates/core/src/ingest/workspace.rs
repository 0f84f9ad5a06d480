use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::canonical::canonicalize;
use super::rubric::{score_task, TaskRubric};
use super::translate::TranslationTable;
use crate::model::{
    ActionKind, ActionRef, Block, BlockRole, CanonicalModel, DeltaDirection, LoggedAction, MasteryDelta,
    MasteryScore, ModelState, ProcessedAction, TaskId, Timestamp,
};
use crate::{Error, Result};

/// Payload keys understood by [`Workspace::apply`].
pub mod payload {
    /// Block role, in the `BlockRole` JSON spelling (`VAR_INIT`, ...).
    pub const ROLE: &str = "role";
    pub const EXPRESSION: &str = "expression";
    /// A full `ModelState` JSON document; replaces every block.
    pub const MODEL_STATE: &str = "model_state";
}

fn parse_role(s: &str) -> Result<BlockRole> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_uppercase()))
        .map_err(|_| Error::Invalid(format!("unknown block role {s}")))
}

/// The student's block program as it evolves through a session.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    task: TaskId,
    blocks: Vec<Block>,
    at: Timestamp,
}

impl Workspace {
    pub fn new(task: TaskId) -> Self {
        Self { task, blocks: Vec::new(), at: 0 }
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    /// Applies the structural effect of one action. Returns whether the
    /// program changed.
    ///
    /// `ADD` and `EDIT` read `role` and `expression` from the payload for
    /// `block_id`; `REMOVE` drops `block_id`; any action may carry a full
    /// `model_state` snapshot, which wins.
    pub fn apply(&mut self, a: &LoggedAction) -> Result<bool> {
        self.at = self.at.max(a.timestamp);
        if let Some(snapshot) = a.payload.get(payload::MODEL_STATE) {
            let state: ModelState = serde_json::from_str(snapshot)?;
            state.validate()?;
            let changed = state.blocks != self.blocks;
            self.blocks = state.blocks;
            return Ok(changed);
        }
        let expression = a.payload.get(payload::EXPRESSION);
        let role = a.payload.get(payload::ROLE).map(|r| parse_role(r)).transpose()?;
        match (a.kind, &a.block_id) {
            (ActionKind::Add | ActionKind::Edit, Some(id)) => {
                let existing = self.blocks.iter_mut().find(|b| &b.block_id == id);
                match (existing, expression) {
                    (Some(b), expr) => {
                        let before = b.clone();
                        if let Some(e) = expr {
                            b.expression = e.clone();
                        }
                        if let Some(r) = role {
                            b.role = r;
                        }
                        Ok(*b != before)
                    }
                    (None, Some(e)) => {
                        self.blocks.push(Block {
                            block_id: id.clone(),
                            role: role.unwrap_or(BlockRole::Other),
                            expression: e.clone(),
                        });
                        Ok(true)
                    }
                    (None, None) => Ok(false),
                }
            }
            (ActionKind::Remove, Some(id)) => {
                let n = self.blocks.len();
                self.blocks.retain(|b| &b.block_id != id);
                Ok(self.blocks.len() != n)
            }
            _ => Ok(false),
        }
    }

    pub fn state(&self) -> ModelState {
        ModelState { task: self.task.clone(), blocks: self.blocks.clone(), captured_at: self.at }
    }

    pub fn canonical(&self) -> CanonicalModel {
        canonicalize(&self.state())
    }
}

pub fn classify_delta(action: ActionRef, before: &MasteryScore, after: &MasteryScore) -> Result<MasteryDelta> {
    if before.task != after.task {
        return Err(Error::TaskMismatch(before.task.clone(), after.task.clone()));
    }
    let diff = after.value - before.value;
    let direction = if diff > 0.0 {
        DeltaDirection::Advance
    } else if diff < 0.0 {
        DeltaDirection::Deteriorate
    } else {
        DeltaDirection::Neutral
    };
    Ok(MasteryDelta { action, before: before.clone(), after: after.clone(), direction })
}

/// Output of ingesting one session's log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestedLog {
    pub processed: Vec<ProcessedAction>,
    /// Score after every action, aligned with `processed`.
    pub timeline: Vec<MasteryScore>,
    pub deltas: Vec<MasteryDelta>,
    pub final_model: CanonicalModel,
}

/// Incremental ingestion for one session stream.
#[derive(Clone, Debug)]
pub struct SessionIngestor {
    workspace: Workspace,
    rubric: Option<TaskRubric>,
    last: MasteryScore,
    count: usize,
}

impl SessionIngestor {
    pub fn new(task: TaskId, rubric: Option<TaskRubric>) -> Result<Self> {
        if let Some(r) = &rubric {
            if r.task != task {
                return Err(Error::RubricTaskMismatch { rubric: r.task.clone(), model: task });
            }
        }
        let last = MasteryScore { task: task.clone(), value: 0.0, criteria_met: Default::default(), at: 0 };
        Ok(Self { workspace: Workspace::new(task), rubric, last, count: 0 })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn mastery(&self) -> &MasteryScore {
        &self.last
    }

    pub fn actions_seen(&self) -> usize {
        self.count
    }

    /// Translates and applies one action, rescoring when the program changed.
    pub fn push(&mut self, a: &LoggedAction, table: &TranslationTable) -> Result<(ProcessedAction, MasteryScore, MasteryDelta)> {
        a.validate()?;
        if a.task != *self.workspace.task() {
            return Err(Error::TaskMismatch(self.workspace.task().clone(), a.task.clone()));
        }
        let processed = table.translate(a, self.count);
        self.count += 1;
        let changed = self.workspace.apply(a)?;
        let before = self.last.clone();
        let after = match (&self.rubric, changed) {
            (Some(r), true) => score_task(&self.workspace.canonical(), self.workspace.task(), r, a.timestamp)?,
            _ => MasteryScore { at: a.timestamp, ..before.clone() },
        };
        let delta = classify_delta(processed.source.clone(), &before, &after)?;
        self.last = after.clone();
        Ok((processed, after, delta))
    }
}

/// Ingests a whole session log in order.
pub fn ingest_log(actions: &[LoggedAction], table: &TranslationTable, rubric: Option<&TaskRubric>) -> Result<IngestedLog> {
    let Some(first) = actions.first() else {
        return Ok(IngestedLog { processed: vec![], timeline: vec![], deltas: vec![], final_model: Default::default() });
    };
    let mut ing = SessionIngestor::new(first.task.clone(), rubric.cloned())?;
    let mut out = IngestedLog { processed: vec![], timeline: vec![], deltas: vec![], final_model: Default::default() };
    let mut last_ts = 0;
    for a in actions {
        if a.timestamp < last_ts {
            return Err(Error::Invalid(format!("timestamps go backwards at {} ({} < {last_ts})", a.raw, a.timestamp)));
        }
        last_ts = a.timestamp;
        let (p, s, d) = ing.push(a, table)?;
        out.processed.push(p);
        out.timeline.push(s);
        out.deltas.push(d);
    }
    out.final_model = ing.workspace().canonical();
    Ok(out)
}

/// Mastery at time `t`: the latest score at or before `t`, if any.
pub fn mastery_at(timeline: &[MasteryScore], t: Timestamp) -> Option<&MasteryScore> {
    let idx = timeline.partition_point(|s| s.at <= t);
    idx.checked_sub(1).map(|i| &timeline[i])
}

/// Parses a JSON-Lines activity log. Errors name the 1-based line.
pub fn parse_jsonl(text: &str) -> std::result::Result<Vec<LoggedAction>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: LoggedAction = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
        a.validate().map_err(|e| (i + 1, e.to_string()))?;
        out.push(a);
    }
    Ok(out)
}

/// Tally of delta directions.
pub fn delta_counts(deltas: &[MasteryDelta]) -> BTreeMap<DeltaDirection, usize> {
    let mut m = BTreeMap::new();
    for d in deltas {
        *m.entry(d.direction).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(v: f64) -> MasteryScore {
        MasteryScore { task: "t".parse().unwrap(), value: v, criteria_met: Default::default(), at: 0 }
    }

    fn aref() -> ActionRef {
        ActionRef { session: "s".parse().unwrap(), index: 0, timestamp: 0, raw: "x".into() }
    }

    #[test]
    fn delta_directions() {
        assert_eq!(classify_delta(aref(), &score(0.5), &score(0.75)).unwrap().direction, DeltaDirection::Advance);
        assert_eq!(classify_delta(aref(), &score(0.5), &score(0.5)).unwrap().direction, DeltaDirection::Neutral);
        assert_eq!(classify_delta(aref(), &score(0.5), &score(0.25)).unwrap().direction, DeltaDirection::Deteriorate);
        let other = MasteryScore { task: "u".parse().unwrap(), ..score(0.1) };
        assert!(matches!(classify_delta(aref(), &score(0.5), &other), Err(Error::TaskMismatch(..))));
    }

    #[test]
    fn join_rule_takes_latest_at_or_before() {
        let tl: Vec<MasteryScore> =
            [(10, 0.1), (20, 0.2), (20, 0.3), (30, 0.4)].iter().map(|&(at, v)| MasteryScore { at, ..score(v) }).collect();
        assert!(mastery_at(&tl, 5).is_none());
        assert_eq!(mastery_at(&tl, 20).unwrap().value, 0.3);
        assert_eq!(mastery_at(&tl, 25).unwrap().value, 0.3);
        assert_eq!(mastery_at(&tl, 99).unwrap().value, 0.4);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let text = "{\"timestamp\":1,\"dyad\":\"d\",\"session\":\"s\",\"task\":\"t\",\"raw\":\"run_sim\",\"kind\":\"RUN\"}\n\n{bad";
        assert_eq!(parse_jsonl(text).unwrap_err().0, 3);
    }
}
