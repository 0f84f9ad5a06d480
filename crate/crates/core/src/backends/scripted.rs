use std::collections::VecDeque;
use std::path::Path;

use parking_lot::Mutex;
use serde_json::{Map, Value};

use super::reply::{json_scalar, parse_reply};
use super::{BackendError, BackendKind, ChatBackend, ReplySchema, StructuredReply};

/// Deterministic replay backend.
///
/// Consumes one JSON object per call, in order, and errors once the script
/// runs dry. Reserved keys: `evidence` (evidence text), `latency_ms`,
/// `model`, `raw` (a verbatim reply to run through the reply parser instead
/// of using the object's fields) and `error` (`timeout`, `transport`, or an
/// HTTP status such as `"503"`) to simulate a failing call.
pub struct ScriptedBackend {
    name: String,
    model: String,
    state: Mutex<ScriptState>,
}

struct ScriptState {
    queue: VecDeque<Map<String, Value>>,
    consumed: usize,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend").field("name", &self.name).field("remaining", &self.remaining()).finish()
    }
}

const RESERVED: [&str; 5] = ["evidence", "latency_ms", "model", "raw", "error"];

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, entries: Vec<Map<String, Value>>) -> Self {
        Self {
            name: name.into(),
            model: "scripted-replay".into(),
            state: Mutex::new(ScriptState { queue: entries.into(), consumed: 0 }),
        }
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self::new(name, Vec::new())
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn from_jsonl_str(name: impl Into<String>, text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line)
                .map_err(|e| BackendError::Script(format!("line {}: {e}", i + 1)))?;
            match value {
                Value::Object(obj) => entries.push(obj),
                _ => return Err(BackendError::Script(format!("line {}: expected a JSON object", i + 1))),
            }
        }
        Ok(Self::new(name, entries))
    }

    pub fn from_jsonl_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_jsonl_str(path.display().to_string(), &text)
    }

    /// Appends a reply; used by simulators that decide replies on the fly.
    pub fn push(&self, entry: Map<String, Value>) {
        self.state.lock().queue.push_back(entry);
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().queue.len()
    }

    pub fn consumed(&self) -> usize {
        self.state.lock().consumed
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::ScriptedReplay
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, _prompt: &str, schema: &ReplySchema) -> Result<StructuredReply, BackendError> {
        let entry = {
            let mut st = self.state.lock();
            let consumed = st.consumed;
            let e = st
                .queue
                .pop_front()
                .ok_or_else(|| BackendError::ScriptExhausted { script: self.name.clone(), consumed })?;
            st.consumed += 1;
            e
        };
        if let Some(err) = entry.get("error") {
            let err = json_scalar(err);
            return Err(match err.as_str() {
                "timeout" => BackendError::Timeout,
                "transport" => BackendError::Transport("scripted transport failure".into()),
                s => match s.parse::<u16>() {
                    Ok(status) => BackendError::Http { status, body: "scripted failure".into() },
                    Err(_) => BackendError::Script(format!("unknown scripted error {s:?}")),
                },
            });
        }
        let model = entry.get("model").map(json_scalar).unwrap_or_else(|| self.model.clone());
        let latency_ms = entry.get("latency_ms").and_then(Value::as_u64).unwrap_or(0);

        if let Some(raw) = entry.get("raw").map(json_scalar) {
            let (fields, evidence_text) = parse_reply(&raw, schema)?;
            return Ok(StructuredReply { fields, evidence_text, raw, model, latency_ms });
        }

        let raw = Value::Object(entry.clone()).to_string();
        let mut fields: std::collections::BTreeMap<String, String> = entry
            .iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), json_scalar(v)))
            .collect();
        schema.validate(&mut fields, &raw)?;
        let evidence_text = entry.get("evidence").map(json_scalar).unwrap_or_default();
        Ok(StructuredReply { fields, evidence_text, raw, model, latency_ms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> ReplySchema {
        ReplySchema::new("policy").one_of("label", ["PROBE_UNDERSTANDING", "SUGGEST_ACTION"])
    }

    #[test]
    fn passthrough_then_exhaustion() {
        let b = ScriptedBackend::from_jsonl_str(
            "s",
            r#"{"label":"PROBE_UNDERSTANDING","evidence":"they asked for the answer"}"#,
        )
        .unwrap();
        let r = b.complete("p", &schema()).unwrap();
        assert_eq!(r.field("label"), Some("PROBE_UNDERSTANDING"));
        assert_eq!(r.evidence_text, "they asked for the answer");
        let err = b.complete("p", &schema()).unwrap_err();
        assert!(matches!(err, BackendError::ScriptExhausted { consumed: 1, .. }));
    }

    #[test]
    fn raw_entries_go_through_the_parser() {
        let b = ScriptedBackend::from_jsonl_str("s", r#"{"raw":"I would suggest:\n```\nlabel: suggest_action\n```"}"#).unwrap();
        let r = b.complete("p", &schema()).unwrap();
        assert_eq!(r.field("label"), Some("SUGGEST_ACTION"));
        assert_eq!(r.evidence_text, "I would suggest:");
    }

    #[test]
    fn simulated_errors() {
        let b = ScriptedBackend::from_jsonl_str("s", "{\"error\":\"timeout\"}\n{\"error\":\"503\"}").unwrap();
        assert_eq!(b.complete("p", &schema()).unwrap_err(), BackendError::Timeout);
        assert!(matches!(b.complete("p", &schema()).unwrap_err(), BackendError::Http { status: 503, .. }));
    }

    #[test]
    fn bad_script_lines_are_reported() {
        let err = ScriptedBackend::from_jsonl_str("s", "{\"a\":1}\n[1,2]").unwrap_err();
        assert!(matches!(err, BackendError::Script(m) if m.contains("line 2")));
    }
}
