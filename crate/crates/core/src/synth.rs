//! Seeded synthetic classrooms.
//!
//! Scripted dyads build the `drone-2d` model (ten equally weighted criteria,
//! so every decile is reachable) while chatting with a rule-based engine.
//! The students are scripted; the engine is not. Every policy in the output
//! comes from the real rule table, classifier and agents.
//!
//! Two profiles:
//!
//! * `improving`: dyads build the model one component at a time from scratch.
//!   They talk more while mastery is low, ask for solutions and say they are
//!   confused more often at low mastery, and answer a probe with an
//!   explanation with a probability that rises with mastery.
//! * `flat`: dyads start from a starter project at mastery 0.8 and tinker
//!   inside the top band without trending. Message kinds and turn counts do
//!   not depend on mastery.
//!
//! The RQ4 fixtures ([`rq4_traces`]) are built separately: traces whose links
//! quote each other, and the same traces with every link shuffled
//! independently.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::SessionRecord;
use crate::engine::Engine;
use crate::model::{ActionKind, DialogueStateLabel, DyadId, EvidenceTrace, LoggedAction, PolicyKind, SessionId, TaskId, Timestamp};
use crate::replay::ReplayEntry;
use crate::{Error, Result};

pub const SYNTH_TASK: &str = "drone-2d";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Improving,
    Flat,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "improving" => Ok(Profile::Improving),
            "flat" => Ok(Profile::Flat),
            _ => Err(Error::Invalid(format!("unknown profile {s:?}; expected improving or flat"))),
        }
    }
}

/// One drone component: the opcode stem, block role, correct expression and
/// a plausible wrong one.
struct Part {
    var: &'static str,
    op: &'static str,
    role: &'static str,
    good: &'static str,
    bad: &'static str,
}

const PARTS: [Part; 10] = [
    Part { var: "x", op: "add", role: "VAR_INIT", good: "x = 0", bad: "x = 5" },
    Part { var: "y", op: "add", role: "VAR_INIT", good: "y = 50", bad: "y = 0" },
    Part { var: "vx", op: "add", role: "VAR_INIT", good: "vx = 3", bad: "vx = 30" },
    Part { var: "vy", op: "add", role: "VAR_INIT", good: "vy = 0", bad: "vy = 3" },
    Part { var: "ay", op: "add", role: "VAR_INIT", good: "ay = -9.8", bad: "ay = 9.8" },
    Part { var: "dt", op: "add", role: "VAR_INIT", good: "dt = 0.1", bad: "dt = 1" },
    Part { var: "loop", op: "add", role: "LOOP", good: "y > 0", bad: "x > 0" },
    Part { var: "vy", op: "update", role: "VAR_UPDATE", good: "vy = vy + ay * dt", bad: "vy = vy + ay" },
    Part { var: "x", op: "update", role: "VAR_UPDATE", good: "x = x + vx * dt", bad: "x = x + vx" },
    Part { var: "y", op: "update", role: "VAR_UPDATE", good: "y = y + vy * dt", bad: "y = y - vy * dt" },
];

const TOPICS: [&str; 6] = ["x position", "y velocity", "time step", "loop", "gravity", "drone"];

/// Student messages per dialogue state. `{t}` is replaced by a topic. Each
/// one is checked against the keyword classifier in the tests below.
const MESSAGES: [(DialogueStateLabel, &[&str]); 6] = [
    (
        DialogueStateLabel::RequestsSolution,
        &[
            "just tell us the answer for the {t}",
            "can you give us the answer",
            "what do we put for the {t}",
            "show us the code for the {t} please",
        ],
    ),
    (
        DialogueStateLabel::ExpressesConfusion,
        &[
            "we are confused about the {t}",
            "we dont understand what the {t} does",
            "not sure what to do with the {t}",
            "this makes no sense, the drone just sits there",
        ],
    ),
    (
        DialogueStateLabel::DemonstratesUnderstanding,
        &[
            "the {t} changes every step because velocity is the rate of change of position",
            "vy has to be updated before y since gravity changes the speed first",
            "we multiply by dt so the change is per time step",
            "the loop stops when y reaches zero which means the drone landed",
        ],
    ),
    (
        DialogueStateLabel::ReportsProgress,
        &["we added the {t} block", "we changed the {t} and ran it", "we fixed the {t}", "finished the {t} part"],
    ),
    (
        DialogueStateLabel::AsksConceptualQuestion,
        &["what does the {t} do in the loop?", "how does gravity change vy?", "why is the {t} needed?"],
    ),
    (DialogueStateLabel::Other, &["ok", "hmm let me think", "one sec", "cool"]),
];

fn message(rng: &mut ChaCha8Rng, label: DialogueStateLabel) -> String {
    let bank = MESSAGES.iter().find(|(l, _)| *l == label).map(|(_, b)| *b).expect("every label has messages");
    let text = bank.choose(rng).expect("non-empty bank");
    text.replace("{t}", TOPICS.choose(rng).expect("topics"))
}

fn pick(rng: &mut ChaCha8Rng, weights: &[(DialogueStateLabel, f64)]) -> DialogueStateLabel {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen::<f64>() * total;
    for (l, w) in weights {
        if r < *w {
            return *l;
        }
        r -= w;
    }
    weights.last().expect("weights").0
}

/// Everything a scripted dyad needs to act on the engine.
struct Dyad<'a> {
    engine: &'a Engine,
    log: &'a mut Vec<ReplayEntry>,
    rng: ChaCha8Rng,
    profile: Profile,
    dyad: DyadId,
    task: TaskId,
    session: SessionId,
    now: Timestamp,
    next_block: usize,
    /// Block id per part, if placed; and whether it currently holds the good expression.
    placed: Vec<Option<(String, bool)>>,
    last_policy: Option<PolicyKind>,
    events: usize,
}

impl Dyad<'_> {
    fn mastery(&self) -> f64 {
        self.placed.iter().filter(|p| matches!(p, Some((_, true)))).count() as f64 / PARTS.len() as f64
    }

    fn act(&mut self, raw: String, kind: ActionKind, block: Option<String>, payload: &[(&str, &str)]) -> Result<()> {
        self.now += 4_000;
        self.events += 1;
        let a = LoggedAction {
            event_id: Some(format!("{}-e{:04}", self.session, self.events)),
            timestamp: self.now,
            dyad: self.dyad.clone(),
            session: self.session.clone(),
            task: self.task.clone(),
            raw,
            kind,
            block_id: block,
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        self.log.push(ReplayEntry::Action(a.clone()));
        self.engine.append_actions(&self.session, vec![a])?;
        Ok(())
    }

    fn place(&mut self, i: usize, good: bool) -> Result<()> {
        let p = &PARTS[i];
        let expr = if good { p.good } else { p.bad };
        let (block, raw, kind) = match &self.placed[i] {
            Some((b, _)) => {
                let n = b.trim_start_matches("blk");
                let raw = match (p.var, p.op) {
                    ("loop", _) => format!("change_block{n}_loop"),
                    (v, "update") => format!("update_block{n}_{v}"),
                    (v, _) => format!("set_block{n}_{v}_{}", crate::ingest::canonical::rhs(expr)),
                };
                (b.clone(), raw, ActionKind::Edit)
            }
            None => {
                self.next_block += 1;
                let n = self.next_block;
                let kind = if p.op == "update" { ActionKind::Edit } else { ActionKind::Add };
                (format!("blk{n}"), format!("{}_block{n}_{}", p.op, p.var), kind)
            }
        };
        self.act(raw, kind, Some(block.clone()), &[("role", p.role), ("expression", expr)])?;
        self.placed[i] = Some((block, good));
        Ok(())
    }

    fn run_sim(&mut self) -> Result<()> {
        self.act("run_sim".into(), ActionKind::Run, None, &[])
    }

    fn talk(&mut self) -> Result<()> {
        let m = self.mastery();
        let label = match self.profile {
            Profile::Improving => {
                let success = 0.1 + 1.5 * m;
                if self.last_policy == Some(PolicyKind::ProbeUnderstanding) && self.rng.gen_bool(success.min(0.95)) {
                    DialogueStateLabel::DemonstratesUnderstanding
                } else {
                    use DialogueStateLabel::*;
                    pick(
                        &mut self.rng,
                        &[
                            (RequestsSolution, 0.35 * (1.0 - m) + 0.02),
                            (ExpressesConfusion, 0.35 * (1.0 - m) + 0.02),
                            (DemonstratesUnderstanding, 0.05 + 0.3 * m),
                            (ReportsProgress, 0.1 + 0.3 * m),
                            (AsksConceptualQuestion, 0.1 + 0.2 * m),
                            (Other, 0.05),
                        ],
                    )
                }
            }
            Profile::Flat => *DialogueStateLabel::ALL.choose(&mut self.rng).expect("labels"),
        };
        let text = message(&mut self.rng, label);
        self.now += 3_000;
        self.log.push(ReplayEntry::Turn { dyad: self.dyad.clone(), message: text.clone(), at: self.now });
        let out = self.engine.run_turn(&self.session, &text, self.now)?;
        self.last_policy = Some(out.talk_move.policy.kind);
        Ok(())
    }

    /// Turns before the next step: more while mastery is low.
    fn chat(&mut self) -> Result<()> {
        let n = match self.profile {
            Profile::Improving => {
                let lambda = 3.0 * (1.0 - self.mastery()).powf(1.5) + 0.2;
                let whole = lambda.floor() as usize;
                whole + usize::from(self.rng.gen_bool(lambda.fract()))
            }
            Profile::Flat => self.rng.gen_range(0..=2),
        };
        for _ in 0..n {
            self.talk()?;
        }
        Ok(())
    }

    fn improving(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..PARTS.len()).collect();
        order.shuffle(&mut self.rng);
        for i in order {
            self.chat()?;
            self.place(i, true)?;
            if self.rng.gen_bool(0.3) {
                let done: Vec<usize> = (0..PARTS.len()).filter(|&j| matches!(self.placed[j], Some((_, true)))).collect();
                let j = *done.choose(&mut self.rng).expect("just placed one");
                self.place(j, false)?;
                if self.rng.gen_bool(0.5) {
                    self.run_sim()?;
                }
                self.chat()?;
                self.place(j, true)?;
            }
            if self.rng.gen_bool(0.6) {
                self.run_sim()?;
            }
        }
        self.chat()
    }

    fn flat(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..PARTS.len()).collect();
        order.shuffle(&mut self.rng);
        // The starter project: eight parts in place before anyone talks.
        for &i in &order[..8] {
            self.place(i, true)?;
        }
        self.run_sim()?;
        for _ in 0..12 {
            self.chat()?;
            let good: Vec<usize> = (0..PARTS.len()).filter(|&j| matches!(self.placed[j], Some((_, true)))).collect();
            let bad: Vec<usize> = (0..PARTS.len()).filter(|&j| !matches!(self.placed[j], Some((_, true)))).collect();
            // Stay within [0.7, 0.9] so every turn sees the same rule band.
            let m = good.len();
            let break_one = match m {
                7 => false,
                9 => true,
                _ => self.rng.gen_bool(0.5),
            };
            if break_one {
                let j = *good.choose(&mut self.rng).expect("parts in place");
                self.place(j, false)?;
            } else {
                let j = *bad.choose(&mut self.rng).expect("parts missing");
                self.place(j, true)?;
            }
            if self.rng.gen_bool(0.5) {
                self.run_sim()?;
            }
        }
        Ok(())
    }
}

/// A generated corpus and the log that reproduces it through [`crate::replay::replay`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sessions: Vec<SessionRecord>,
    pub log: Vec<ReplayEntry>,
}

pub fn generate(profile: Profile, dyads: usize, seed: u64) -> Result<Corpus> {
    let engine = Engine::bundled();
    generate_with(&engine, profile, dyads, seed)
}

/// Runs the scripted dyads against `engine`, which should use the
/// rule-based dialogue agent for the profiles to mean what they say.
pub fn generate_with(engine: &Engine, profile: Profile, dyads: usize, seed: u64) -> Result<Corpus> {
    let task: TaskId = SYNTH_TASK.parse()?;
    let mut log = Vec::new();
    let mut sessions = Vec::new();
    for k in 0..dyads {
        let dyad: DyadId = format!("dyad-{k:03}").parse()?;
        let start = 1_000_000 * k as Timestamp;
        log.push(ReplayEntry::Open { dyad: dyad.clone(), task: task.clone(), at: start });
        let session = engine.open_session(&dyad, &task, start)?;
        let mut d = Dyad {
            engine,
            log: &mut log,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)),
            profile,
            dyad: dyad.clone(),
            task: task.clone(),
            session: session.clone(),
            now: start,
            next_block: 0,
            placed: vec![None; PARTS.len()],
            last_policy: None,
            events: 0,
        };
        match profile {
            Profile::Improving => d.improving()?,
            Profile::Flat => d.flat()?,
        }
        let end = d.now + 1_000;
        log.push(ReplayEntry::Close { dyad, at: end });
        engine.close_session(&session, end)?;
        engine.quiesce();
        sessions.push(engine.record(&session)?);
    }
    Ok(Corpus { sessions, log })
}

const FIELD_WORDS: [&str; 24] = [
    "altitude", "gravity", "velocity", "position", "timestep", "landing", "thrust", "horizontal", "vertical",
    "boundary", "condition", "increment", "variable", "accelerate", "simulation", "parameter", "constant",
    "iteration", "distance", "trajectory", "momentum", "friction", "update", "initial",
];

/// Traces whose links quote each other (`grounded`) or, with `scrambled`,
/// the same traces after shuffling each link's text independently across
/// traces, so no link is related to its neighbour.
pub fn rq4_traces(count: usize, seed: u64, scrambled: bool) -> Vec<EvidenceTrace> {
    use crate::model::{ActionRef, BackendMetadata, DialoguePolicy, DialogueState, InputSnapshot, ProcessedAction, TraceId};
    use std::collections::BTreeMap;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = DialogueStateLabel::ALL;
    let mut traces: Vec<EvidenceTrace> = (0..count)
        .map(|i| {
            let words: Vec<&str> = FIELD_WORDS.choose_multiple(&mut rng, 4).copied().collect();
            let session: SessionId = format!("rq4-s{:03}", i / 10).parse().expect("non-empty");
            let actions: Vec<ProcessedAction> = words
                .iter()
                .enumerate()
                .map(|(j, w)| ProcessedAction {
                    source: ActionRef { session: session.clone(), index: j, timestamp: j as u64, raw: format!("set_{w}") },
                    description: format!("Set the {w} block to a new value"),
                    category: ActionKind::Edit,
                    concept_tags: vec![(*w).to_string()],
                    untranslatable: false,
                })
                .collect();
            let label = *labels.choose(&mut rng).expect("labels");
            let policy = *PolicyKind::ALL.choose(&mut rng).expect("policies");
            let evidence_text = format!("The students changed the {} and {} blocks while working on {}.", words[0], words[1], words[2]);
            let summary = format!("The students talk about {} and {}", words[0], words[3]);
            let rationale = format!(
                "Because the students are working on {} and {}, with {} in view, the tutor chooses {policy}.",
                words[0], words[1], words[3]
            );
            let feedback = format!("Look again at your {} and {} blocks. What happens to {}?", words[0], words[1], words[3]);
            let mut evidence = BTreeMap::new();
            evidence.insert(crate::agents::STRATEGY_AGENT.to_string(), evidence_text);
            EvidenceTrace {
                trace: TraceId::new(format!("{session}-t{:04}", i % 10)).expect("non-empty"),
                dyad: format!("rq4-d{:03}", i / 10).parse().expect("non-empty"),
                session,
                task: SYNTH_TASK.parse().expect("non-empty"),
                turn_index: (i % 10) as u32,
                timestamp: i as u64,
                input_snapshot: InputSnapshot {
                    message: format!("what about the {}?", words[3]),
                    actions,
                    model_digest: String::new(),
                    learner_model_version: 0,
                },
                evidence,
                dialogue_state: DialogueState { label, summary },
                decision: DialoguePolicy { kind: policy, rationale },
                feedback,
                mastery_at_turn: None,
                backend_metadata: BackendMetadata { model: "synthetic".into(), ..Default::default() },
                flags: vec![],
            }
        })
        .collect();
    if scrambled {
        let n = traces.len();
        let perm = |rng: &mut ChaCha8Rng| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        };
        let (p1, p2, p3, p4) = (perm(&mut rng), perm(&mut rng), perm(&mut rng), perm(&mut rng));
        let evidence: Vec<_> = p1.iter().map(|&j| traces[j].evidence.clone()).collect();
        let summaries: Vec<_> = p2.iter().map(|&j| traces[j].dialogue_state.clone()).collect();
        let decisions: Vec<_> = p3.iter().map(|&j| traces[j].decision.clone()).collect();
        let feedback: Vec<_> = p4.iter().map(|&j| traces[j].feedback.clone()).collect();
        for (i, t) in traces.iter_mut().enumerate() {
            t.evidence = evidence[i].clone();
            t.dialogue_state = summaries[i].clone();
            t.decision = decisions[i].clone();
            t.feedback = feedback[i].clone();
        }
    }
    traces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::classify_keywords;

    #[test]
    fn every_message_classifies_as_intended() {
        for (label, bank) in MESSAGES {
            for m in bank {
                for t in TOPICS {
                    let text = m.replace("{t}", t);
                    assert_eq!(classify_keywords(&text).0.label, label, "{text}");
                }
            }
        }
    }

    #[test]
    fn scripted_build_reaches_full_mastery() {
        let c = generate(Profile::Improving, 1, 3).unwrap();
        let last = c.sessions[0].mastery_timeline.last().unwrap();
        assert!((last.value - 1.0).abs() < 1e-12);
        assert!(!c.sessions[0].traces.is_empty());
    }

    #[test]
    fn flat_stays_in_top_band() {
        let c = generate(Profile::Flat, 2, 3).unwrap();
        for s in &c.sessions {
            for t in &s.traces {
                let m = t.mastery_at_turn.unwrap();
                assert!((0.7 - 1e-9..=0.9 + 1e-9).contains(&m), "{m}");
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(Profile::Improving, 2, 11).unwrap();
        let b = generate(Profile::Improving, 2, 11).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.log, b.log);
    }
}
