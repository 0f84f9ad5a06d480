//! Session engine: wires ingestion, the evidence agents and the dialogue
//! agent around one learner store, and emits every state change as an
//! [`Event`] so a journal can rebuild the engine after a restart.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::agents::{EvidenceAgents, EvidenceContext};
use crate::analytics::SessionRecord;
use crate::catalog::Catalog;
use crate::dialogue::{ConversationTurn, DialogueAgent, TurnContext, TurnOutcome, TurnRequest};
use crate::ingest::{mastery_at, SessionIngestor};
use crate::learner::{CommitSink, LearnerModel, LearnerModelUpdate, LearnerStore};
use crate::model::{
    CanonicalModel, DyadId, EvidenceTrace, LoggedAction, MasteryDelta, MasteryScore, ProcessedAction, SessionId,
    TaskId, Timestamp, TraceId,
};
use crate::{Error, Result};

/// One journaled state change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionOpened { session: SessionId, dyad: DyadId, task: TaskId, at: Timestamp },
    ActionsAppended { session: SessionId, actions: Vec<LoggedAction> },
    TurnCompleted { session: SessionId, turn: ConversationTurn, trace: Box<EvidenceTrace> },
    LearnerCommitted { dyad: DyadId, version: u64, digest: String, update: LearnerModelUpdate },
    SessionClosed { session: SessionId, at: Timestamp },
}

/// Durable sink for events. Appends must be ordered and atomic per event.
pub trait Journal: Send + Sync {
    fn append(&self, event: &Event) -> Result<()>;
}

/// Discards events.
pub struct NullJournal;

impl Journal for NullJournal {
    fn append(&self, _: &Event) -> Result<()> {
        Ok(())
    }
}

/// Keeps events in memory, for tests and offline replays.
#[derive(Default)]
pub struct MemoryJournal {
    events: Mutex<Vec<Event>>,
}

impl MemoryJournal {
    pub fn events(&self) -> Vec<Event> {
        self.events.lock().clone()
    }
}

impl Journal for MemoryJournal {
    fn append(&self, event: &Event) -> Result<()> {
        self.events.lock().push(event.clone());
        Ok(())
    }
}

struct JournalSink(Arc<dyn Journal>);

impl CommitSink for JournalSink {
    fn committed(&self, model: &LearnerModel, update: &LearnerModelUpdate) -> Result<()> {
        self.0.append(&Event::LearnerCommitted {
            dyad: model.dyad.clone(),
            version: model.version,
            digest: model.digest(),
            update: update.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    /// Agents run on the caller's thread before `append_actions` returns.
    /// Deterministic; used by replays and tests.
    #[default]
    Inline,
    /// Agents run on a bounded worker pool; `append_actions` only acknowledges.
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub evidence_mode: EvidenceMode,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { evidence_mode: EvidenceMode::Inline, workers: default_workers() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendReceipt {
    pub accepted: usize,
    pub duplicates: usize,
    /// Evidence-agent runs started by this batch.
    pub agent_runs: usize,
}

struct SessionData {
    id: SessionId,
    dyad: DyadId,
    task: TaskId,
    opened_at: Timestamp,
    closed_at: Option<Timestamp>,
    ingestor: SessionIngestor,
    processed: Vec<ProcessedAction>,
    deltas: Vec<MasteryDelta>,
    /// Score at open, then one per action.
    timeline: Vec<MasteryScore>,
    event_ids: HashSet<String>,
    last_timestamp: Timestamp,
    since_agents: usize,
    agent_seq: u64,
    turns: Vec<ConversationTurn>,
    traces: Vec<TraceId>,
}

struct Session {
    data: Mutex<SessionData>,
    /// Held for the whole of a turn, so turn indices are assigned in order.
    turn_lock: Mutex<()>,
    /// Sequence number of the newest agent run that has finished.
    agent_lock: Mutex<u64>,
}

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

/// A unit of evidence-agent work over an immutable copy of session state.
struct AgentJob {
    session: Arc<Session>,
    seq: u64,
    dyad: DyadId,
    task: TaskId,
    actions: Vec<ProcessedAction>,
    deltas: Vec<MasteryDelta>,
    model: CanonicalModel,
    mastery: MasteryScore,
    now: Timestamp,
}

impl AgentJob {
    fn run(&self, agents: &EvidenceAgents, store: &LearnerStore) -> Result<()> {
        let mut last = self.session.agent_lock.lock();
        if *last > self.seq {
            return Ok(());
        }
        let ctx = EvidenceContext {
            dyad: &self.dyad,
            task: &self.task,
            actions: &self.actions,
            deltas: &self.deltas,
            model: &self.model,
            mastery: &self.mastery,
            now: self.now,
        };
        agents.run(store, &ctx)?;
        *last = self.seq;
        Ok(())
    }
}

pub struct Engine {
    pub catalog: Arc<Catalog>,
    pub store: Arc<LearnerStore>,
    pub agents: Arc<EvidenceAgents>,
    pub dialogue: Arc<DialogueAgent>,
    config: EngineConfig,
    journal: Arc<dyn Journal>,
    sessions: RwLock<BTreeMap<SessionId, Arc<Session>>>,
    open_by_dyad: Mutex<HashMap<DyadId, SessionId>>,
    traces: RwLock<HashMap<TraceId, Arc<EvidenceTrace>>>,
    pool: Option<rayon::ThreadPool>,
    pending: Arc<Pending>,
    agent_errors: Arc<Mutex<Vec<String>>>,
}

impl Engine {
    pub fn new(
        catalog: Arc<Catalog>,
        agents: EvidenceAgents,
        dialogue: DialogueAgent,
        journal: Arc<dyn Journal>,
        config: EngineConfig,
    ) -> Result<Self> {
        let store = Arc::new(LearnerStore::new());
        let pool = match config.evidence_mode {
            EvidenceMode::Inline => None,
            EvidenceMode::Background => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers.max(1))
                    .thread_name(|i| format!("evidence-{i}"))
                    .build()
                    .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?,
            ),
        };
        Ok(Self {
            catalog,
            store,
            agents: Arc::new(agents),
            dialogue: Arc::new(dialogue),
            config,
            journal,
            sessions: RwLock::new(BTreeMap::new()),
            open_by_dyad: Mutex::new(HashMap::new()),
            traces: RwLock::new(HashMap::new()),
            pool,
            pending: Arc::default(),
            agent_errors: Arc::default(),
        })
    }

    /// Engine over the bundled catalog and rule table, rule-based agents,
    /// no backend and no journal.
    pub fn bundled() -> Self {
        let catalog = Arc::new(Catalog::bundled());
        let agents = EvidenceAgents::new(catalog.clone());
        let dialogue = DialogueAgent::new(catalog.clone(), crate::dialogue::PolicyRuleTable::bundled());
        let e = Self::new(catalog, agents, dialogue, Arc::new(NullJournal), EngineConfig::default()).expect("inline engine");
        e.attach_journal();
        e
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Routes learner-model commits to the journal. Call after [`restore`](Self::restore).
    pub fn attach_journal(&self) {
        self.store.set_sink(Arc::new(JournalSink(self.journal.clone())));
    }

    fn session(&self, id: &SessionId) -> Result<Arc<Session>> {
        self.sessions.read().get(id).cloned().ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    fn next_session_id(&self, dyad: &DyadId) -> SessionId {
        let sessions = self.sessions.read();
        let n = sessions.values().filter(|s| s.data.lock().dyad == *dyad).count() + 1;
        let mut k = n;
        loop {
            let id = SessionId::new(format!("{dyad}-s{k:03}")).expect("non-empty");
            if !sessions.contains_key(&id) {
                return id;
            }
            k += 1;
        }
    }

    /// Opens a session. A dyad may have only one open session at a time.
    pub fn open_session(&self, dyad: &DyadId, task: &TaskId, at: Timestamp) -> Result<SessionId> {
        self.open_session_as(None, dyad, task, at)
    }

    /// Opens a session under a caller-chosen id, e.g. one taken from an
    /// offline log. `None` assigns `{dyad}-sNNN`.
    pub fn open_session_as(&self, id: Option<SessionId>, dyad: &DyadId, task: &TaskId, at: Timestamp) -> Result<SessionId> {
        if self.catalog.task(task).is_none() {
            return Err(Error::UnknownTask(task.clone()));
        }
        let mut open = self.open_by_dyad.lock();
        if let Some(existing) = open.get(dyad) {
            return Err(Error::SessionAlreadyOpen { dyad: dyad.clone(), session: existing.to_string() });
        }
        let id = match id {
            Some(id) if self.sessions.read().contains_key(&id) => {
                return Err(Error::Invalid(format!("session id {id} is already in use")));
            }
            Some(id) => id,
            None => self.next_session_id(dyad),
        };
        let event = Event::SessionOpened { session: id.clone(), dyad: dyad.clone(), task: task.clone(), at };
        self.journal.append(&event)?;
        self.apply_open(&id, dyad, task, at)?;
        open.insert(dyad.clone(), id.clone());
        Ok(id)
    }

    fn apply_open(&self, id: &SessionId, dyad: &DyadId, task: &TaskId, at: Timestamp) -> Result<()> {
        let rubric = self.catalog.task(task).map(|b| b.rubric.clone());
        let ingestor = SessionIngestor::new(task.clone(), rubric)?;
        let initial = MasteryScore { at, ..ingestor.mastery().clone() };
        self.store.register(dyad);
        let data = SessionData {
            id: id.clone(),
            dyad: dyad.clone(),
            task: task.clone(),
            opened_at: at,
            closed_at: None,
            ingestor,
            processed: vec![],
            deltas: vec![],
            timeline: vec![initial],
            event_ids: HashSet::new(),
            last_timestamp: at,
            since_agents: 0,
            agent_seq: 0,
            turns: vec![],
            traces: vec![],
        };
        let session = Arc::new(Session { data: Mutex::new(data), turn_lock: Mutex::new(()), agent_lock: Mutex::new(0) });
        self.sessions.write().insert(id.clone(), session);
        Ok(())
    }

    /// Validates a batch, journals it, ingests it and triggers the evidence
    /// agents. The batch is rejected whole if any action is invalid.
    /// Actions whose `event_id` was already seen are skipped.
    pub fn append_actions(&self, session: &SessionId, actions: Vec<LoggedAction>) -> Result<AppendReceipt> {
        let s = self.session(session)?;
        let (receipt, jobs) = {
            let mut d = s.data.lock();
            if d.closed_at.is_some() {
                return Err(Error::SessionClosed(session.to_string()));
            }
            let mut seen = d.event_ids.clone();
            let mut fresh = Vec::with_capacity(actions.len());
            let mut duplicates = 0;
            let mut last_ts = d.last_timestamp;
            for (i, a) in actions.into_iter().enumerate() {
                if a.session != d.id || a.dyad != d.dyad || a.task != d.task {
                    return Err(Error::Invalid(format!(
                        "action {i} belongs to session {} / dyad {} / task {}, not {} / {} / {}",
                        a.session, a.dyad, a.task, d.id, d.dyad, d.task
                    )));
                }
                a.validate().map_err(|e| Error::Invalid(format!("action {i}: {e}")))?;
                if let Some(eid) = &a.event_id {
                    if !seen.insert(eid.clone()) {
                        duplicates += 1;
                        continue;
                    }
                }
                if a.timestamp < last_ts {
                    return Err(Error::Invalid(format!("action {i}: timestamp {} is before {last_ts}", a.timestamp)));
                }
                last_ts = a.timestamp;
                fresh.push(a);
            }
            let mut dry = d.ingestor.clone();
            for (i, a) in fresh.iter().enumerate() {
                dry.push(a, &self.catalog.table).map_err(|e| Error::Invalid(format!("action {i}: {e}")))?;
            }
            if !fresh.is_empty() {
                self.journal.append(&Event::ActionsAppended { session: session.clone(), actions: fresh.clone() })?;
            }
            let accepted = fresh.len();
            let jobs = self.apply_actions(&s, &mut d, &fresh)?;
            (AppendReceipt { accepted, duplicates, agent_runs: jobs.len() }, jobs)
        };
        for job in jobs {
            self.dispatch(job);
        }
        Ok(receipt)
    }

    /// Ingests already-validated actions and returns the agent jobs they trigger.
    fn apply_actions(&self, s: &Arc<Session>, d: &mut SessionData, actions: &[LoggedAction]) -> Result<Vec<AgentJob>> {
        let trigger = self.agents.config.trigger;
        let mut jobs = Vec::new();
        for a in actions {
            let (p, score, delta) = d.ingestor.push(a, &self.catalog.table)?;
            if let Some(eid) = &a.event_id {
                d.event_ids.insert(eid.clone());
            }
            d.last_timestamp = a.timestamp;
            d.since_agents += 1;
            let fires = trigger.fires(d.since_agents, &p);
            d.processed.push(p);
            d.deltas.push(delta);
            d.timeline.push(score.clone());
            if fires {
                d.since_agents = 0;
                d.agent_seq += 1;
                jobs.push(AgentJob {
                    session: s.clone(),
                    seq: d.agent_seq,
                    dyad: d.dyad.clone(),
                    task: d.task.clone(),
                    actions: d.processed.clone(),
                    deltas: d.deltas.clone(),
                    model: d.ingestor.workspace().canonical(),
                    mastery: score,
                    now: a.timestamp,
                });
            }
        }
        Ok(jobs)
    }

    fn dispatch(&self, job: AgentJob) {
        match &self.pool {
            None => {
                if let Err(e) = job.run(&self.agents, &self.store) {
                    self.agent_errors.lock().push(e.to_string());
                }
            }
            Some(pool) => {
                *self.pending.count.lock() += 1;
                let (agents, store, pending, errors) =
                    (self.agents.clone(), self.store.clone(), self.pending.clone(), self.agent_errors.clone());
                pool.spawn(move || {
                    if let Err(e) = job.run(&agents, &store) {
                        errors.lock().push(e.to_string());
                    }
                    let mut n = pending.count.lock();
                    *n -= 1;
                    if *n == 0 {
                        pending.idle.notify_all();
                    }
                });
            }
        }
    }

    /// Blocks until no background agent run is pending.
    pub fn quiesce(&self) {
        let mut n = self.pending.count.lock();
        while *n > 0 {
            self.pending.idle.wait(&mut n);
        }
    }

    /// Errors raised by agent runs so far.
    pub fn agent_errors(&self) -> Vec<String> {
        self.agent_errors.lock().clone()
    }

    /// Runs one dialogue turn against the latest committed learner model.
    pub fn run_turn(&self, session: &SessionId, message: &str, at: Timestamp) -> Result<TurnOutcome> {
        let s = self.session(session)?;
        let _turn = s.turn_lock.lock();
        let (request, task, turn_index, actions, model, mastery, history) = {
            let d = s.data.lock();
            if d.closed_at.is_some() {
                return Err(Error::SessionClosed(session.to_string()));
            }
            let request = TurnRequest { dyad: d.dyad.clone(), session: d.id.clone(), message: message.to_string(), timestamp: at };
            let mastery = mastery_at(&d.timeline, at).map(|m| m.value);
            (
                request,
                d.task.clone(),
                d.turns.len() as u32,
                d.processed.clone(),
                d.ingestor.workspace().canonical(),
                mastery,
                d.turns.clone(),
            )
        };
        let ctx = TurnContext {
            request: &request,
            task: &task,
            turn_index,
            actions: &actions,
            model: &model,
            mastery_at_turn: mastery,
            history: &history,
        };
        let outcome = self.dialogue.run_turn(&self.store, &ctx)?;
        let turn = ConversationTurn {
            turn_index,
            timestamp: at,
            message: message.to_string(),
            state: outcome.trace.dialogue_state.label,
            policy: outcome.talk_move.policy.kind,
            talk_move: outcome.talk_move.text.clone(),
            trace: outcome.trace.trace.clone(),
        };
        self.journal.append(&Event::TurnCompleted {
            session: session.clone(),
            turn: turn.clone(),
            trace: Box::new(outcome.trace.clone()),
        })?;
        self.apply_turn(&s, turn, outcome.trace.clone());
        Ok(outcome)
    }

    fn apply_turn(&self, s: &Session, turn: ConversationTurn, trace: EvidenceTrace) {
        let mut d = s.data.lock();
        d.traces.push(trace.trace.clone());
        d.turns.push(turn);
        self.traces.write().insert(trace.trace.clone(), Arc::new(trace));
    }

    pub fn close_session(&self, session: &SessionId, at: Timestamp) -> Result<()> {
        let s = self.session(session)?;
        let _turn = s.turn_lock.lock();
        let mut d = s.data.lock();
        if d.closed_at.is_some() {
            return Err(Error::SessionClosed(session.to_string()));
        }
        self.journal.append(&Event::SessionClosed { session: session.clone(), at })?;
        d.closed_at = Some(at);
        self.open_by_dyad.lock().remove(&d.dyad);
        Ok(())
    }

    pub fn learner_model(&self, dyad: &DyadId) -> Result<Arc<LearnerModel>> {
        self.store.read(dyad)
    }

    pub fn trace(&self, id: &TraceId) -> Option<Arc<EvidenceTrace>> {
        self.traces.read().get(id).cloned()
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.read().keys().cloned().collect()
    }

    pub fn is_open(&self, session: &SessionId) -> Result<bool> {
        Ok(self.session(session)?.data.lock().closed_at.is_none())
    }

    /// Current workspace model and mastery of a session.
    pub fn session_state(&self, session: &SessionId) -> Result<(CanonicalModel, MasteryScore, usize)> {
        let s = self.session(session)?;
        let d = s.data.lock();
        let last = d.timeline.last().cloned().expect("timeline starts with the opening score");
        Ok((d.ingestor.workspace().canonical(), last, d.processed.len()))
    }

    /// Analysis-ready record of one session.
    pub fn record(&self, session: &SessionId) -> Result<SessionRecord> {
        let s = self.session(session)?;
        let d = s.data.lock();
        let traces = self.traces.read();
        Ok(SessionRecord {
            dyad: d.dyad.clone(),
            session: d.id.clone(),
            task: d.task.clone(),
            opened_at: d.opened_at,
            closed_at: d.closed_at,
            mastery_timeline: d.timeline.clone(),
            deltas: d.deltas.clone(),
            traces: d.traces.iter().filter_map(|t| traces.get(t).map(|x| (**x).clone())).collect(),
        })
    }

    pub fn records(&self) -> Result<Vec<SessionRecord>> {
        self.session_ids().iter().map(|s| self.record(s)).collect()
    }

    /// Rebuilds state from journaled events. Learner-model commits are
    /// replayed verbatim and checked against their recorded digests; agents
    /// are not re-run. Commits at or below a dyad's current version are
    /// skipped, so learner snapshots may be installed first with
    /// [`LearnerStore::restore`]. Call on a fresh engine, before
    /// [`attach_journal`](Self::attach_journal).
    pub fn restore<I>(&self, events: I) -> Result<usize>
    where
        I: IntoIterator<Item = Event>,
    {
        let mut n = 0;
        for event in events {
            n += 1;
            match event {
                Event::SessionOpened { session, dyad, task, at } => {
                    self.apply_open(&session, &dyad, &task, at)?;
                    self.open_by_dyad.lock().insert(dyad, session);
                }
                Event::ActionsAppended { session, actions } => {
                    let s = self.session(&session)?;
                    let mut d = s.data.lock();
                    // Agent effects arrive as their own commit events.
                    let jobs = self.apply_actions(&s, &mut d, &actions)?;
                    if let Some(last) = jobs.last() {
                        *s.agent_lock.lock() = last.seq;
                    }
                }
                Event::TurnCompleted { session, turn, trace } => {
                    let s = self.session(&session)?;
                    self.apply_turn(&s, turn, *trace);
                }
                Event::LearnerCommitted { dyad, version, digest, update } => {
                    if self.store.version(&dyad).unwrap_or(0) >= version {
                        continue;
                    }
                    self.store.replay(&dyad, &update, version, &digest)?;
                }
                Event::SessionClosed { session, at } => {
                    let s = self.session(&session)?;
                    let mut d = s.data.lock();
                    d.closed_at = Some(at);
                    self.open_by_dyad.lock().remove(&d.dyad);
                }
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionKind;

    fn action(session: &SessionId, dyad: &DyadId, task: &TaskId, ts: u64, raw: &str, kind: ActionKind, payload: &[(&str, &str)]) -> LoggedAction {
        LoggedAction {
            event_id: Some(format!("e{ts}")),
            timestamp: ts,
            dyad: dyad.clone(),
            session: session.clone(),
            task: task.clone(),
            raw: raw.into(),
            kind,
            block_id: Some(format!("b{ts}")),
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn engine_with_journal(mode: EvidenceMode) -> (Engine, Arc<MemoryJournal>) {
        let catalog = Arc::new(Catalog::bundled());
        let journal = Arc::new(MemoryJournal::default());
        let e = Engine::new(
            catalog.clone(),
            EvidenceAgents::new(catalog.clone()),
            DialogueAgent::new(catalog, crate::dialogue::PolicyRuleTable::bundled()),
            journal.clone(),
            EngineConfig { evidence_mode: mode, workers: 2 },
        )
        .unwrap();
        e.attach_journal();
        (e, journal)
    }

    fn drive(e: &Engine) -> SessionId {
        let dyad: DyadId = "d1".parse().unwrap();
        let task: TaskId = "truck-constant-velocity".parse().unwrap();
        let s = e.open_session(&dyad, &task, 0).unwrap();
        let acts = vec![
            action(&s, &dyad, &task, 10, "add_block1_pos", ActionKind::Add, &[("role", "VAR_INIT"), ("expression", "position = 0")]),
            action(&s, &dyad, &task, 20, "add_block2_vel", ActionKind::Add, &[("role", "VAR_INIT"), ("expression", "velocity = 4")]),
            action(&s, &dyad, &task, 30, "run_sim", ActionKind::Run, &[]),
        ];
        e.append_actions(&s, acts).unwrap();
        e.quiesce();
        e.run_turn(&s, "we set the velocity to 4 because the truck moves at 4 m/s", 40).unwrap();
        s
    }

    #[test]
    fn session_lifecycle_and_turn_snapshot() {
        let (e, _) = engine_with_journal(EvidenceMode::Inline);
        let s = drive(&e);
        let rec = e.record(&s).unwrap();
        assert_eq!(rec.traces.len(), 1);
        assert_eq!(rec.traces[0].input_snapshot.actions.len(), 3);
        assert!(rec.traces[0].evidence.contains_key(crate::agents::STRATEGY_AGENT));
        assert!((rec.traces[0].mastery_at_turn.unwrap() - 0.4).abs() < 1e-12);
        let dyad: DyadId = "d1".parse().unwrap();
        let task: TaskId = "truck-constant-velocity".parse().unwrap();
        assert!(matches!(e.open_session(&dyad, &task, 50), Err(Error::SessionAlreadyOpen { .. })));
        e.close_session(&s, 60).unwrap();
        assert!(matches!(e.run_turn(&s, "hi", 70), Err(Error::SessionClosed(_))));
        assert!(e.open_session(&dyad, &task, 80).is_ok());
    }

    #[test]
    fn duplicate_event_ids_are_ignored() {
        let (e, _) = engine_with_journal(EvidenceMode::Inline);
        let s = drive(&e);
        let dyad: DyadId = "d1".parse().unwrap();
        let task: TaskId = "truck-constant-velocity".parse().unwrap();
        let again = action(&s, &dyad, &task, 10, "add_block1_pos", ActionKind::Add, &[]);
        let r = e.append_actions(&s, vec![again]).unwrap();
        assert_eq!((r.accepted, r.duplicates), (0, 1));
    }

    #[test]
    fn restore_reproduces_learner_history() {
        for mode in [EvidenceMode::Inline, EvidenceMode::Background] {
            let (e, journal) = engine_with_journal(mode);
            drive(&e);
            let dyad: DyadId = "d1".parse().unwrap();
            let before = e.learner_model(&dyad).unwrap();
            let (fresh, _) = engine_with_journal(EvidenceMode::Inline);
            fresh.restore(journal.events()).unwrap();
            let after = fresh.learner_model(&dyad).unwrap();
            assert_eq!(*before, *after);
            assert_eq!(e.records().unwrap(), fresh.records().unwrap());

            // A snapshot taken mid-history stands in for the commits it covers.
            let events = journal.events();
            let cut = events.iter().position(|ev| matches!(ev, Event::LearnerCommitted { .. })).unwrap();
            let partial = Engine::bundled();
            partial.restore(events[..=cut].to_vec()).unwrap();
            let snap = (*partial.learner_model(&dyad).unwrap()).clone();
            let (resumed, _) = engine_with_journal(EvidenceMode::Inline);
            resumed.store.restore(snap);
            resumed.restore(events).unwrap();
            assert_eq!(*resumed.learner_model(&dyad).unwrap(), *before);
        }
    }

    #[test]
    fn backwards_timestamps_reject_the_whole_batch() {
        let (e, _) = engine_with_journal(EvidenceMode::Inline);
        let dyad: DyadId = "d1".parse().unwrap();
        let task: TaskId = "truck-constant-velocity".parse().unwrap();
        let s = e.open_session(&dyad, &task, 100).unwrap();
        let acts = vec![
            action(&s, &dyad, &task, 110, "run_sim", ActionKind::Run, &[]),
            action(&s, &dyad, &task, 105, "run_sim", ActionKind::Run, &[]),
        ];
        assert!(e.append_actions(&s, acts).is_err());
        assert_eq!(e.session_state(&s).unwrap().2, 0);
    }
}
