//! Append-only event store on disk.
//!
//! ```text
//! <data>/journal/segment-000001.jsonl   one Event per line, in commit order
//! <data>/journal/segment-000002.jsonl
//! <data>/snapshots/learners.json        latest learner models, written atomically
//! ```
//!
//! Each process start opens a fresh segment, so a line torn by a crash is
//! only ever the last line of an older segment; it is dropped on load.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use copa_core::engine::{Engine, Event, Journal};
use copa_core::learner::LearnerModel;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

const SEGMENT_PREFIX: &str = "segment-";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

struct Segment {
    file: File,
    index: u32,
    events: usize,
}

pub struct FileJournal {
    dir: PathBuf,
    segment_events: usize,
    fsync: bool,
    current: Mutex<Segment>,
    appended: AtomicU64,
}

fn segment_path(dir: &Path, index: u32) -> PathBuf {
    dir.join(format!("{SEGMENT_PREFIX}{index:06}.jsonl"))
}

fn segments(dir: &Path) -> Result<Vec<(u32, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(n) = name.strip_prefix(SEGMENT_PREFIX).and_then(|r| r.strip_suffix(".jsonl")) {
            if let Ok(i) = n.parse::<u32>() {
                out.push((i, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every event in segment order. A malformed final line of a segment is
/// treated as a torn write and skipped; a malformed line elsewhere is an error.
pub fn read_events(dir: &Path) -> Result<Vec<Event>, StoreError> {
    let mut events = Vec::new();
    if !dir.exists() {
        return Ok(events);
    }
    for (_, path) in segments(dir)? {
        let lines: Vec<String> =
            BufReader::new(File::open(&path).map_err(io(&path))?).lines().collect::<Result<_, _>>().map_err(io(&path))?;
        let last = lines.iter().rposition(|l| !l.trim().is_empty());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => events.push(e),
                Err(_) if Some(i) == last => {
                    tracing::warn!(path = %path.display(), line = i + 1, "dropping torn final journal line");
                }
                Err(e) => return Err(StoreError::Corrupt { path: path.clone(), line: i + 1, message: e.to_string() }),
            }
        }
    }
    Ok(events)
}

impl FileJournal {
    /// Opens a new segment after any existing ones.
    pub fn create(dir: &Path, segment_events: usize, fsync: bool) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let next = segments(dir)?.last().map_or(1, |(i, _)| i + 1);
        let segment = Self::open_segment(dir, next)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            segment_events: segment_events.max(1),
            fsync,
            current: Mutex::new(segment),
            appended: AtomicU64::new(0),
        })
    }

    fn open_segment(dir: &Path, index: u32) -> Result<Segment, StoreError> {
        let path = segment_path(dir, index);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        Ok(Segment { file, index, events: 0 })
    }

    /// Events appended by this process.
    pub fn appended(&self) -> u64 {
        self.appended.load(Ordering::Relaxed)
    }
}

impl Journal for FileJournal {
    fn append(&self, event: &Event) -> copa_core::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut seg = self.current.lock();
        if seg.events >= self.segment_events {
            let next = seg.index + 1;
            *seg = Self::open_segment(&self.dir, next).map_err(|e| copa_core::Error::Persistence(e.to_string()))?;
        }
        // One write per event keeps lines whole under concurrent readers.
        seg.file.write_all(&line).map_err(|e| copa_core::Error::Persistence(e.to_string()))?;
        if self.fsync {
            seg.file.sync_data().map_err(|e| copa_core::Error::Persistence(e.to_string()))?;
        }
        seg.events += 1;
        self.appended.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LearnerSnapshot {
    pub models: Vec<LearnerModel>,
}

pub fn write_snapshot(dir: &Path, engine: &Engine) -> Result<PathBuf, StoreError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let models = engine.store.dyads().iter().filter_map(|d| engine.store.read(d).ok()).map(|m| (*m).clone()).collect();
    let snap = LearnerSnapshot { models };
    let path = dir.join("learners.json");
    let tmp = dir.join("learners.json.tmp");
    let bytes = serde_json::to_vec(&snap).expect("snapshot serializes");
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(path)
}

pub fn read_snapshot(dir: &Path) -> Result<Option<LearnerSnapshot>, StoreError> {
    let path = dir.join("learners.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| StoreError::Corrupt { path, line: e.line(), message: e.to_string() })
}

/// An engine bound to a data directory.
pub struct Persistent {
    pub engine: Arc<Engine>,
    pub journal: Arc<FileJournal>,
    pub data_dir: PathBuf,
    snapshot_every: usize,
    last_snapshot: Mutex<u64>,
}

impl Persistent {
    /// Restores whatever `data_dir` holds, then starts journaling new events.
    pub fn open(config: &crate::config::ServiceConfig) -> anyhow::Result<Self> {
        let journal_dir = config.data_dir.join("journal");
        let snapshot_dir = config.data_dir.join("snapshots");
        let events = read_events(&journal_dir)?;
        let snapshot = read_snapshot(&snapshot_dir)?;
        let journal = Arc::new(FileJournal::create(&journal_dir, config.segment_events, config.fsync)?);
        let engine = config.engine(journal.clone())?;
        let saved_rules = config.data_dir.join("rules").join("active.json");
        if saved_rules.exists() {
            engine.dialogue.reload_rules(copa_core::dialogue::PolicyRuleTable::from_file(&saved_rules)?)?;
        }
        if let Some(snap) = snapshot {
            for m in snap.models {
                engine.store.restore(m);
            }
        }
        let n = engine.restore(events)?;
        engine.attach_journal();
        tracing::info!(events = n, dir = %config.data_dir.display(), "store restored");
        Ok(Self {
            engine: Arc::new(engine),
            journal,
            data_dir: config.data_dir.clone(),
            snapshot_every: config.snapshot_every,
            last_snapshot: Mutex::new(0),
        })
    }

    /// Writes a snapshot if enough events were journaled since the last one.
    pub fn maybe_snapshot(&self) -> Result<bool, StoreError> {
        if self.snapshot_every == 0 {
            return Ok(false);
        }
        let mut last = self.last_snapshot.lock();
        let now = self.journal.appended();
        if now - *last < self.snapshot_every as u64 {
            return Ok(false);
        }
        write_snapshot(&self.data_dir.join("snapshots"), &self.engine)?;
        *last = now;
        Ok(true)
    }

    /// Keeps a reloaded rule table across restarts.
    pub fn save_rules(&self, table: &copa_core::dialogue::PolicyRuleTable) -> Result<(), StoreError> {
        let dir = self.data_dir.join("rules");
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let tmp = dir.join("active.json.tmp");
        std::fs::write(&tmp, table.to_json()).map_err(io(&tmp))?;
        let path = dir.join("active.json");
        std::fs::rename(&tmp, &path).map_err(io(&path))
    }

    pub fn snapshot(&self) -> Result<PathBuf, StoreError> {
        let p = write_snapshot(&self.data_dir.join("snapshots"), &self.engine)?;
        *self.last_snapshot.lock() = self.journal.appended();
        Ok(p)
    }
}
