//! Deterministic replays of recorded sessions.
//!
//! A replay log is JSON Lines; each line is one [`ReplayEntry`] tagged by
//! `type`:
//!
//! ```text
//! {"type":"open","dyad":"d01","task":"drone-2d","at":0}
//! {"type":"action","timestamp":4000,"dyad":"d01","session":"d01-s001","task":"drone-2d","raw":"run_sim","kind":"RUN"}
//! {"type":"turn","dyad":"d01","message":"we are stuck","at":7000}
//! {"type":"close","dyad":"d01","at":9000}
//! ```

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analytics::SessionRecord;
use crate::engine::Engine;
use crate::model::{DyadId, EvidenceTrace, LoggedAction, SessionId, TaskId, Timestamp};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReplayEntry {
    Open { dyad: DyadId, task: TaskId, at: Timestamp },
    Action(LoggedAction),
    Turn { dyad: DyadId, message: String, at: Timestamp },
    Close { dyad: DyadId, at: Timestamp },
}

pub fn parse_log(text: &str) -> Result<Vec<ReplayEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("replay log line {}: {e}", i + 1))))
        .collect()
}

pub fn write_log(entries: &[ReplayEntry], mut out: impl Write) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct ReplayRun {
    /// In the order the turns ran.
    pub traces: Vec<EvidenceTrace>,
    pub sessions: Vec<SessionRecord>,
}

/// Feeds a log through the engine. Batches of consecutive actions for one
/// session are appended together.
pub fn replay(engine: &Engine, entries: &[ReplayEntry]) -> Result<ReplayRun> {
    let mut open: HashMap<DyadId, SessionId> = HashMap::new();
    let mut order: Vec<SessionId> = Vec::new();
    let mut traces = Vec::new();
    let mut pending: Vec<LoggedAction> = Vec::new();

    let flush = |pending: &mut Vec<LoggedAction>| -> Result<()> {
        if let Some(first) = pending.first() {
            let session = first.session.clone();
            engine.append_actions(&session, std::mem::take(pending))?;
        }
        Ok(())
    };
    let session_of = |open: &HashMap<DyadId, SessionId>, dyad: &DyadId| {
        open.get(dyad).cloned().ok_or_else(|| Error::Invalid(format!("dyad {dyad} has no open session in the log")))
    };

    for entry in entries {
        match entry {
            ReplayEntry::Action(a) => {
                if pending.last().is_some_and(|p| p.session != a.session) {
                    flush(&mut pending)?;
                }
                pending.push(a.clone());
                continue;
            }
            _ => flush(&mut pending)?,
        }
        match entry {
            ReplayEntry::Open { dyad, task, at } => {
                let s = engine.open_session(dyad, task, *at)?;
                order.push(s.clone());
                open.insert(dyad.clone(), s);
            }
            ReplayEntry::Turn { dyad, message, at } => {
                let s = session_of(&open, dyad)?;
                engine.quiesce();
                traces.push(engine.run_turn(&s, message, *at)?.trace);
            }
            ReplayEntry::Close { dyad, at } => {
                let s = session_of(&open, dyad)?;
                engine.close_session(&s, *at)?;
                open.remove(dyad);
            }
            ReplayEntry::Action(_) => unreachable!(),
        }
    }
    flush(&mut pending)?;
    engine.quiesce();
    let sessions = order.iter().map(|s| engine.record(s)).collect::<Result<_>>()?;
    Ok(ReplayRun { traces, sessions })
}
