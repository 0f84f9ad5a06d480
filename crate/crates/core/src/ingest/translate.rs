use std::collections::BTreeSet;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audit::stem::stem;
use crate::model::{ActionKind, ActionRef, LoggedAction, ProcessedAction};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationEntry {
    /// Opcode pattern; `{name}` is a slot matching one `_`-free run.
    pub pattern: String,
    /// Description template; may reference the pattern's slots.
    pub description: String,
    pub category: ActionKind,
    #[serde(default)]
    pub concept_tags: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TableDoc {
    schema_version: u32,
    entries: Vec<TranslationEntry>,
}

#[derive(Clone, Debug)]
struct Compiled {
    entry: TranslationEntry,
    regex: Regex,
    slots: Vec<String>,
    segments: Vec<Segment>,
}

/// One `_`-separated piece of a pattern: literal text, optionally with one slot.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slotted { prefix: String, suffix: String },
}

impl Segment {
    fn overlaps(&self, other: &Segment) -> bool {
        use Segment::*;
        match (self, other) {
            (Literal(a), Literal(b)) => a == b,
            (Literal(l), Slotted { prefix, suffix }) | (Slotted { prefix, suffix }, Literal(l)) => {
                l.len() > prefix.len() + suffix.len() && l.starts_with(prefix.as_str()) && l.ends_with(suffix.as_str())
            }
            (Slotted { prefix: p1, suffix: s1 }, Slotted { prefix: p2, suffix: s2 }) => {
                (p1.starts_with(p2.as_str()) || p2.starts_with(p1.as_str()))
                    && (s1.ends_with(s2.as_str()) || s2.ends_with(s1.as_str()))
            }
        }
    }
}

/// Maps raw environment opcodes to processed-action descriptions.
#[derive(Clone, Debug)]
pub struct TranslationTable {
    schema_version: u32,
    compiled: Vec<Compiled>,
}

pub const TRANSLATION_SCHEMA_VERSION: u32 = 1;

fn slot_regex() -> Regex {
    Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("valid regex")
}

impl TranslationTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TableDoc = serde_json::from_str(text)?;
        if doc.schema_version != TRANSLATION_SCHEMA_VERSION {
            return Err(Error::Invalid(format!("unsupported translation table schema_version {}", doc.schema_version)));
        }
        Self::new(doc.entries)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let doc = TableDoc { schema_version: self.schema_version, entries: self.entries().cloned().collect() };
        serde_json::to_string_pretty(&doc).expect("table serializes")
    }

    /// Validates and compiles the entries.
    pub fn new(entries: Vec<TranslationEntry>) -> Result<Self> {
        let slot_re = slot_regex();
        let mut compiled = Vec::with_capacity(entries.len());
        for entry in entries {
            if entry.pattern.trim().is_empty() || entry.description.trim().is_empty() {
                return Err(Error::Invalid("translation entry with empty pattern or description".into()));
            }
            let mut slots = Vec::new();
            let mut segments = Vec::new();
            let mut re = String::from("^");
            for (i, seg) in entry.pattern.split('_').enumerate() {
                if i > 0 {
                    re.push('_');
                }
                let caps: Vec<_> = slot_re.captures_iter(seg).collect();
                match caps.as_slice() {
                    [] => {
                        re.push_str(&regex::escape(seg));
                        segments.push(Segment::Literal(seg.to_string()));
                    }
                    [c] => {
                        let m = c.get(0).expect("whole match");
                        let name = c[1].to_string();
                        if slots.contains(&name) {
                            return Err(Error::Invalid(format!("pattern {} repeats slot {name}", entry.pattern)));
                        }
                        let (prefix, suffix) = (&seg[..m.start()], &seg[m.end()..]);
                        re.push_str(&regex::escape(prefix));
                        re.push_str("([^_]+)");
                        re.push_str(&regex::escape(suffix));
                        segments.push(Segment::Slotted { prefix: prefix.into(), suffix: suffix.into() });
                        slots.push(name);
                    }
                    _ => {
                        return Err(Error::Invalid(format!(
                            "pattern {} has more than one slot in segment {seg}",
                            entry.pattern
                        )))
                    }
                }
            }
            re.push('$');
            for c in slot_re.captures_iter(&entry.description) {
                if !slots.iter().any(|s| s == &c[1]) {
                    return Err(Error::Invalid(format!(
                        "description of {} references undeclared slot {}",
                        entry.pattern, &c[1]
                    )));
                }
            }
            let regex = Regex::new(&re).map_err(|e| Error::Invalid(e.to_string()))?;
            compiled.push(Compiled { entry, regex, slots, segments });
        }
        for (i, a) in compiled.iter().enumerate() {
            for b in &compiled[i + 1..] {
                let overlap = a.segments.len() == b.segments.len()
                    && a.segments.iter().zip(&b.segments).all(|(x, y)| x.overlaps(y));
                if overlap {
                    return Err(Error::Invalid(format!(
                        "ambiguous translation patterns {} and {}",
                        a.entry.pattern, b.entry.pattern
                    )));
                }
            }
        }
        Ok(Self { schema_version: TRANSLATION_SCHEMA_VERSION, compiled })
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranslationEntry> {
        self.compiled.iter().map(|c| &c.entry)
    }

    /// Lowercased leading verbs of every description template.
    pub fn action_verbs(&self) -> BTreeSet<String> {
        self.entries()
            .filter_map(|e| e.description.split_whitespace().next())
            .filter(|w| w.chars().all(char::is_alphabetic))
            .map(str::to_lowercase)
            .collect()
    }

    /// Whether `text` uses one of the table's action verbs, in any inflection.
    pub fn mentions_action(&self, text: &str) -> bool {
        let verbs = self.action_verbs();
        let verb_stems: BTreeSet<String> = verbs.iter().map(|v| stem(v)).collect();
        crate::audit::recall::tokenize(text)
            .any(|t| verbs.iter().any(|v| t.starts_with(v.as_str())) || verb_stems.contains(&stem(&t)))
    }

    /// Total: unmatched opcodes come back flagged with the raw opcode as description.
    pub fn translate(&self, action: &LoggedAction, index: usize) -> ProcessedAction {
        let source = ActionRef {
            session: action.session.clone(),
            index,
            timestamp: action.timestamp,
            raw: action.raw.clone(),
        };
        for c in &self.compiled {
            if let Some(caps) = c.regex.captures(&action.raw) {
                let mut description = c.entry.description.clone();
                for (i, slot) in c.slots.iter().enumerate() {
                    description = description.replace(&format!("{{{slot}}}"), &caps[i + 1]);
                }
                return ProcessedAction {
                    source,
                    description,
                    category: c.entry.category,
                    concept_tags: c.entry.concept_tags.clone(),
                    untranslatable: false,
                };
            }
        }
        ProcessedAction {
            source,
            description: action.raw.clone(),
            category: ActionKind::Other,
            concept_tags: Vec::new(),
            untranslatable: true,
        }
    }
}
