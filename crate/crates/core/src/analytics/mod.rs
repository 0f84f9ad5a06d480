//! Adaptivity analyses over finished sessions: how policy choice, probe
//! success and reliance on the agent vary with concurrent task mastery.
//!
//! Every analysis bins turns by the mastery at the turn, normalizes per dyad
//! and runs Spearman over `(bin index, per-dyad value)` observations. With
//! `pooled` set, the dyad values are first averaged within each bin, giving
//! one observation per non-empty bin.

mod spearman;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use spearman::{average_ranks, spearman, spearman_rho, CorrelationResult, PMethod, ALPHA, EXACT_MAX_N};

use crate::ingest::mastery_at;
use crate::model::{
    DeltaDirection, DialogueStateLabel, DyadId, EvidenceTrace, MasteryDelta, MasteryScore, PolicyKind, SessionId,
    TaskId, Timestamp,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BinScheme {
    #[default]
    Quintile,
    Decile,
}

impl BinScheme {
    pub fn count(self) -> usize {
        match self {
            BinScheme::Quintile => 5,
            BinScheme::Decile => 10,
        }
    }

    /// `min(floor(k * m), k - 1)`. A tiny offset keeps values such as 0.7,
    /// which are a hair below their decimal in binary, in the bin they name.
    pub fn index(self, mastery: f64) -> usize {
        let k = self.count();
        let m = mastery.clamp(0.0, 1.0);
        ((k as f64 * m + 1e-9).floor() as usize).min(k - 1)
    }

    pub fn bin(self, index: usize) -> MasteryBin {
        let k = self.count() as f64;
        MasteryBin { scheme: self, index, lo: index as f64 / k, hi: (index + 1) as f64 / k }
    }

    pub fn bin_of(self, mastery: f64) -> MasteryBin {
        self.bin(self.index(mastery))
    }
}

impl std::str::FromStr for BinScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quintile" => Ok(BinScheme::Quintile),
            "decile" => Ok(BinScheme::Decile),
            _ => Err(Error::Invalid(format!("unknown bin scheme {s:?}; expected quintile or decile"))),
        }
    }
}

/// `[lo, hi)`; the top bin also holds 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryBin {
    pub scheme: BinScheme,
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Everything the analyses need from one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub dyad: DyadId,
    pub session: SessionId,
    pub task: TaskId,
    pub opened_at: Timestamp,
    #[serde(default)]
    pub closed_at: Option<Timestamp>,
    /// Score at open, then one per action.
    pub mastery_timeline: Vec<MasteryScore>,
    #[serde(default)]
    pub deltas: Vec<MasteryDelta>,
    /// In turn order.
    pub traces: Vec<EvidenceTrace>,
}

impl SessionRecord {
    /// Mastery attributed to a turn: the recorded value, else the latest
    /// score at or before the turn.
    pub fn mastery_of(&self, trace: &EvidenceTrace) -> Option<f64> {
        trace.mastery_at_turn.or_else(|| mastery_at(&self.mastery_timeline, trace.timestamp).map(|m| m.value))
    }
}

/// Reads session records from a `.json` file (one record or an array), a
/// `.jsonl` file (one record per line), or a directory of such files.
pub fn load_sessions(path: &Path) -> Result<Vec<SessionRecord>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_sessions(&f)?);
        }
        return Ok(out);
    }
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        return read_sessions_jsonl(reader);
    }
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    match value {
        serde_json::Value::Array(_) => Ok(serde_json::from_value(value)?),
        _ => Ok(vec![serde_json::from_value(value)?]),
    }
}

pub fn read_sessions_jsonl(reader: impl BufRead) -> Result<Vec<SessionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("session record on line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Denominator of a policy's frequency in RQ1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Turns of the session in the same bin: the policy mix at that mastery.
    #[default]
    WithinBin,
    /// All turns of the session. Bins where a dyad lingers weigh more for
    /// every policy, so dwell time shows up as a trend.
    SessionTotal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub scheme: BinScheme,
    /// One observation per bin instead of one per dyad and bin.
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

impl AnalysisOptions {
    pub fn quintiles() -> Self {
        Self { scheme: BinScheme::Quintile, pooled: false, normalization: Normalization::WithinBin }
    }

    pub fn deciles() -> Self {
        Self { scheme: BinScheme::Decile, ..Self::quintiles() }
    }
}

/// One bin of a plot table: how many dyads contribute and their mean value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: MasteryBin,
    pub dyads: usize,
    pub mean: f64,
}

/// Per-dyad cell values, keyed by dyad then bin index.
type Cells = BTreeMap<DyadId, BTreeMap<usize, f64>>;

fn table(cells: &Cells, scheme: BinScheme) -> Vec<BinRow> {
    let mut by_bin: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for bins in cells.values() {
        for (&b, &v) in bins {
            by_bin.entry(b).or_default().push(v);
        }
    }
    by_bin
        .into_iter()
        .map(|(b, vs)| BinRow { bin: scheme.bin(b), dyads: vs.len(), mean: vs.iter().sum::<f64>() / vs.len() as f64 })
        .collect()
}

fn correlate(cells: &Cells, scheme: BinScheme, pooled: bool) -> Result<CorrelationResult> {
    let (x, y): (Vec<f64>, Vec<f64>) = if pooled {
        table(cells, scheme).iter().map(|r| (r.bin.index as f64, r.mean)).unzip()
    } else {
        cells.values().flat_map(|bins| bins.iter().map(|(&b, &v)| (b as f64, v))).unzip()
    };
    spearman(&x, &y)
}

/// A turn reduced to what the analyses use.
#[derive(Clone, Copy, Debug)]
struct Turn {
    bin: usize,
    policy: PolicyKind,
    state: DialogueStateLabel,
    at: Timestamp,
}

fn turns(record: &SessionRecord, scheme: BinScheme) -> Vec<Turn> {
    record
        .traces
        .iter()
        .filter_map(|t| {
            record.mastery_of(t).map(|m| Turn {
                bin: scheme.index(m),
                policy: t.decision.kind,
                state: t.dialogue_state.label,
                at: t.timestamp,
            })
        })
        .collect()
}

fn by_dyad(sessions: &[SessionRecord]) -> BTreeMap<DyadId, Vec<&SessionRecord>> {
    let mut out: BTreeMap<DyadId, Vec<&SessionRecord>> = BTreeMap::new();
    for s in sessions {
        out.entry(s.dyad.clone()).or_default().push(s);
    }
    out
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyAdaptation {
    pub policy: PolicyKind,
    pub correlation: CorrelationResult,
    pub table: Vec<BinRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq1Report {
    pub options: AnalysisOptions,
    pub dyads: usize,
    pub turns: usize,
    pub policies: Vec<PolicyAdaptation>,
}

impl Rq1Report {
    pub fn policy(&self, p: PolicyKind) -> &PolicyAdaptation {
        self.policies.iter().find(|x| x.policy == p).expect("every policy is reported")
    }
}

/// Policy frequency by mastery bin. In each session a policy's frequency in
/// a bin is its turns there over the session's turns in that bin (or over
/// all of the session's turns, see [`Normalization`]); a dyad's value for
/// the bin is the mean over its sessions with turns in that bin.
pub fn rq1_policy_adaptation(sessions: &[SessionRecord], options: AnalysisOptions) -> Result<Rq1Report> {
    let scheme = options.scheme;
    let mut cells: BTreeMap<PolicyKind, Cells> = BTreeMap::new();
    let mut total_turns = 0;
    let dyads = by_dyad(sessions);
    for (dyad, recs) in &dyads {
        let mut acc: BTreeMap<PolicyKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for rec in recs {
            let ts = turns(rec, scheme);
            if ts.is_empty() {
                continue;
            }
            total_turns += ts.len();
            let bins: BTreeSet<usize> = ts.iter().map(|t| t.bin).collect();
            for p in PolicyKind::ALL {
                for &b in &bins {
                    let hits = ts.iter().filter(|t| t.bin == b && t.policy == p).count();
                    let denom = match options.normalization {
                        Normalization::WithinBin => ts.iter().filter(|t| t.bin == b).count(),
                        Normalization::SessionTotal => ts.len(),
                    };
                    acc.entry(p).or_default().entry(b).or_default().push(hits as f64 / denom as f64);
                }
            }
        }
        for (p, bins) in acc {
            let row = bins.into_iter().map(|(b, vs)| (b, mean(&vs))).collect();
            cells.entry(p).or_default().insert(dyad.clone(), row);
        }
    }
    if total_turns == 0 {
        return Err(Error::InsufficientData("no turns with a mastery attribution".into()));
    }
    let policies = PolicyKind::ALL
        .into_iter()
        .map(|p| {
            let c = cells.remove(&p).unwrap_or_default();
            Ok(PolicyAdaptation { policy: p, correlation: correlate(&c, scheme, options.pooled)?, table: table(&c, scheme) })
        })
        .collect::<Result<_>>()?;
    Ok(Rq1Report { options, dyads: dyads.len(), turns: total_turns, policies })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaTally {
    pub advance: usize,
    pub deteriorate: usize,
    pub neutral: usize,
}

impl DeltaTally {
    /// ADVANCE per DETERIORATE; `None` without deteriorations.
    pub fn ratio(&self) -> Option<f64> {
        (self.deteriorate > 0).then(|| self.advance as f64 / self.deteriorate as f64)
    }

    fn add(&mut self, d: DeltaDirection) {
        match d {
            DeltaDirection::Advance => self.advance += 1,
            DeltaDirection::Deteriorate => self.deteriorate += 1,
            DeltaDirection::Neutral => self.neutral += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq2Report {
    pub options: AnalysisOptions,
    pub dyads: usize,
    pub probes: usize,
    pub successes: usize,
    /// Probe success rate against mastery.
    pub success: CorrelationResult,
    pub success_table: Vec<BinRow>,
    /// Share of turns classified DEMONSTRATES_UNDERSTANDING against mastery.
    pub understanding: CorrelationResult,
    pub understanding_table: Vec<BinRow>,
    /// Mastery changes in the actions after each talk move, up to the next turn.
    pub post_turn: DeltaTally,
    pub post_turn_by_policy: BTreeMap<PolicyKind, DeltaTally>,
    pub advance_deteriorate_ratio: Option<f64>,
}

/// Probe success: a PROBE_UNDERSTANDING turn succeeds when the next turn of
/// the same session is DEMONSTRATES_UNDERSTANDING. A probe on the last turn
/// has no reply and is not counted. Bins without probes are left out.
pub fn rq2_probe_success(sessions: &[SessionRecord], options: AnalysisOptions) -> Result<Rq2Report> {
    let scheme = options.scheme;
    let dyads = by_dyad(sessions);
    let (mut success_cells, mut understanding_cells) = (Cells::new(), Cells::new());
    let (mut probes, mut successes) = (0, 0);
    let mut post_turn = DeltaTally::default();
    let mut post_turn_by_policy: BTreeMap<PolicyKind, DeltaTally> = BTreeMap::new();
    for (dyad, recs) in &dyads {
        let mut probe_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut state_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for rec in recs {
            let ts = turns(rec, scheme);
            for (i, t) in ts.iter().enumerate() {
                let e = state_counts.entry(t.bin).or_default();
                e.1 += 1;
                if t.state == DialogueStateLabel::DemonstratesUnderstanding {
                    e.0 += 1;
                }
                if t.policy == PolicyKind::ProbeUnderstanding {
                    if let Some(next) = ts.get(i + 1) {
                        let e = probe_counts.entry(t.bin).or_default();
                        e.1 += 1;
                        probes += 1;
                        if next.state == DialogueStateLabel::DemonstratesUnderstanding {
                            e.0 += 1;
                            successes += 1;
                        }
                    }
                }
                // The window is (this turn, next turn]: an action stamped at
                // a turn's time is visible to that turn.
                let end = ts.get(i + 1).map_or(Timestamp::MAX, |n| n.at);
                for d in rec.deltas.iter().filter(|d| d.action.timestamp > t.at && d.action.timestamp <= end) {
                    post_turn.add(d.direction);
                    post_turn_by_policy.entry(t.policy).or_default().add(d.direction);
                }
            }
        }
        let rate = |m: BTreeMap<usize, (usize, usize)>| -> BTreeMap<usize, f64> {
            m.into_iter().filter(|(_, (_, n))| *n > 0).map(|(b, (k, n))| (b, k as f64 / n as f64)).collect()
        };
        let s = rate(probe_counts);
        if !s.is_empty() {
            success_cells.insert(dyad.clone(), s);
        }
        let u = rate(state_counts);
        if !u.is_empty() {
            understanding_cells.insert(dyad.clone(), u);
        }
    }
    if probes == 0 {
        return Err(Error::InsufficientData("no answered PROBE_UNDERSTANDING turns".into()));
    }
    let ratio = post_turn.ratio();
    Ok(Rq2Report {
        options,
        dyads: dyads.len(),
        probes,
        successes,
        success: correlate(&success_cells, scheme, options.pooled)?,
        success_table: table(&success_cells, scheme),
        understanding: correlate(&understanding_cells, scheme, options.pooled)?,
        understanding_table: table(&understanding_cells, scheme),
        post_turn,
        post_turn_by_policy,
        advance_deteriorate_ratio: ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq3Report {
    pub options: AnalysisOptions,
    pub dyads: usize,
    pub turns: usize,
    pub correlation: CorrelationResult,
    /// Mean per-dyad share of turns in each bin.
    pub support_table: Vec<BinRow>,
    /// Sum of the table's means over bins below mastery 0.4.
    pub share_below_0_4: f64,
}

/// Reliance: each dyad's share of its turns in each bin it reached. A bin
/// counts as reached when a score in one of the dyad's mastery timelines falls
/// in it; unreached bins are left out rather than counted as zero.
pub fn rq3_reliance(sessions: &[SessionRecord], options: AnalysisOptions) -> Result<Rq3Report> {
    let scheme = options.scheme;
    let dyads = by_dyad(sessions);
    let mut cells = Cells::new();
    let mut total = 0;
    for (dyad, recs) in &dyads {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut reached: BTreeSet<usize> = BTreeSet::new();
        for rec in recs {
            reached.extend(rec.mastery_timeline.iter().map(|m| scheme.index(m.value)));
            for t in turns(rec, scheme) {
                reached.insert(t.bin);
                *counts.entry(t.bin).or_default() += 1;
            }
        }
        let n: usize = counts.values().sum();
        if n == 0 {
            continue;
        }
        total += n;
        let row = reached.into_iter().map(|b| (b, counts.get(&b).copied().unwrap_or(0) as f64 / n as f64)).collect();
        cells.insert(dyad.clone(), row);
    }
    if total == 0 {
        return Err(Error::InsufficientData("no turns with a mastery attribution".into()));
    }
    let support_table = table(&cells, scheme);
    let share_below_0_4 = support_table.iter().filter(|r| r.bin.hi <= 0.4 + 1e-9).map(|r| r.mean).sum();
    Ok(Rq3Report {
        options,
        dyads: cells.len(),
        turns: total,
        correlation: correlate(&cells, scheme, options.pooled)?,
        support_table,
        share_below_0_4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionRef, BackendMetadata, DialoguePolicy, DialogueState, InputSnapshot, TraceId};

    #[test]
    fn bins_are_total_and_top_inclusive() {
        assert_eq!(BinScheme::Quintile.index(1.0), 4);
        assert_eq!(BinScheme::Decile.index(1.0), 9);
        assert_eq!(BinScheme::Decile.index(0.7), 7);
        assert_eq!(BinScheme::Quintile.index(0.0), 0);
        assert_eq!(BinScheme::Decile.index(0.3999), 3);
    }

    pub(crate) fn trace(session: &str, dyad: &str, i: u32, at: u64, m: f64, p: PolicyKind, s: DialogueStateLabel) -> EvidenceTrace {
        EvidenceTrace {
            trace: TraceId::new(format!("{session}-t{i:04}")).unwrap(),
            dyad: dyad.parse().unwrap(),
            session: session.parse().unwrap(),
            task: "t".parse().unwrap(),
            turn_index: i,
            timestamp: at,
            input_snapshot: InputSnapshot { message: "m".into(), actions: vec![], model_digest: String::new(), learner_model_version: 0 },
            evidence: BTreeMap::new(),
            dialogue_state: DialogueState { label: s, summary: "s".into() },
            decision: DialoguePolicy { kind: p, rationale: "r".into() },
            feedback: "f".into(),
            mastery_at_turn: Some(m),
            backend_metadata: BackendMetadata::default(),
            flags: vec![],
        }
    }

    fn score(v: f64, at: u64) -> MasteryScore {
        MasteryScore { task: "t".parse().unwrap(), value: v, criteria_met: BTreeSet::new(), at }
    }

    fn record(dyad: &str, session: &str, traces: Vec<EvidenceTrace>) -> SessionRecord {
        let timeline = traces.iter().map(|t| score(t.mastery_at_turn.unwrap(), t.timestamp)).collect();
        SessionRecord {
            dyad: dyad.parse().unwrap(),
            session: session.parse().unwrap(),
            task: "t".parse().unwrap(),
            opened_at: 0,
            closed_at: None,
            mastery_timeline: timeline,
            deltas: vec![],
            traces,
        }
    }

    #[test]
    fn single_policy_corpus_is_degenerate_elsewhere() {
        use PolicyKind::*;
        let recs: Vec<_> = (0..3)
            .map(|d| {
                let ts = (0..5)
                    .map(|i| trace(&format!("s{d}"), &format!("d{d}"), i, i as u64 * 10, i as f64 / 5.0 + 0.05 * d as f64, SuggestAction, DialogueStateLabel::Other))
                    .collect();
                record(&format!("d{d}"), &format!("s{d}"), ts)
            })
            .collect();
        let r = rq1_policy_adaptation(&recs, AnalysisOptions::quintiles()).unwrap();
        assert!(r.policy(ProbeUnderstanding).correlation.degenerate);
        assert!(r.policy(PushLimit).correlation.degenerate);
    }

    #[test]
    fn always_successful_probes() {
        use DialogueStateLabel::*;
        let recs: Vec<_> = (0..3)
            .map(|d| {
                let ts = (0..8)
                    .map(|i| {
                        let (p, s) = if i % 2 == 0 { (PolicyKind::ProbeUnderstanding, Other) } else { (PolicyKind::SuggestAction, DemonstratesUnderstanding) };
                        trace(&format!("s{d}"), &format!("d{d}"), i, i as u64 * 10, i as f64 / 10.0, p, s)
                    })
                    .collect();
                record(&format!("d{d}"), &format!("s{d}"), ts)
            })
            .collect();
        let r = rq2_probe_success(&recs, AnalysisOptions::deciles()).unwrap();
        assert!(r.success_table.iter().all(|row| row.mean == 1.0));
        assert!(r.success.degenerate);
        assert_eq!((r.probes, r.successes), (12, 12));
    }

    #[test]
    fn uniform_reliance_is_degenerate() {
        let recs: Vec<_> = (0..4)
            .map(|d| {
                let ts = (0..10)
                    .map(|i| trace(&format!("s{d}"), &format!("d{d}"), i, i as u64, i as f64 / 10.0 + 0.01, PolicyKind::SuggestAction, DialogueStateLabel::Other))
                    .collect();
                record(&format!("d{d}"), &format!("s{d}"), ts)
            })
            .collect();
        let r = rq3_reliance(&recs, AnalysisOptions::deciles()).unwrap();
        assert!(r.correlation.degenerate);
        assert!(r.support_table.iter().all(|row| (row.mean - 0.1).abs() < 1e-12));
        assert!((r.share_below_0_4 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn post_turn_windows() {
        let delta = |s: &str, at: u64, dir| MasteryDelta {
            action: ActionRef { session: s.parse().unwrap(), index: 0, timestamp: at, raw: "x".into() },
            before: score(0.0, at),
            after: score(0.0, at),
            direction: dir,
        };
        let recs: Vec<_> = [0.1, 0.3, 0.5]
            .iter()
            .enumerate()
            .map(|(d, &m)| {
                let (dy, se) = (format!("d{d}"), format!("s{d}"));
                let ts = vec![
                    trace(&se, &dy, 0, 10, m, PolicyKind::ProbeUnderstanding, DialogueStateLabel::Other),
                    trace(&se, &dy, 1, 20, m + 0.2, PolicyKind::SuggestAction, DialogueStateLabel::DemonstratesUnderstanding),
                ];
                let mut rec = record(&dy, &se, ts);
                rec.deltas = vec![
                    delta(&se, 10, DeltaDirection::Deteriorate),
                    delta(&se, 15, DeltaDirection::Advance),
                    delta(&se, 20, DeltaDirection::Advance),
                    delta(&se, 25, DeltaDirection::Deteriorate),
                ];
                rec
            })
            .collect();
        let r = rq2_probe_success(&recs, AnalysisOptions::deciles()).unwrap();
        assert_eq!(r.post_turn_by_policy[&PolicyKind::ProbeUnderstanding].advance, 6);
        assert_eq!(r.post_turn_by_policy[&PolicyKind::SuggestAction].deteriorate, 3);
        assert_eq!(r.advance_deteriorate_ratio, Some(2.0));
        assert_eq!((r.probes, r.successes), (3, 3));
    }
}
