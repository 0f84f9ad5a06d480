use std::collections::BTreeMap;

use super::{BackendError, ReplySchema};

/// Extracts a structured reply from free-form model output.
///
/// Accepts, in order of preference: a bare JSON object, a fenced block
/// holding a JSON object, or a fenced block of `key: value` lines. Prose
/// around the fence is kept as evidence when no `evidence` field is given.
pub fn parse_reply(raw: &str, schema: &ReplySchema) -> Result<(BTreeMap<String, String>, String), BackendError> {
    let trimmed = raw.trim();
    if let Some(fields) = json_fields(trimmed) {
        return finish(fields, String::new(), raw, schema);
    }
    for (block, outside) in fenced_blocks(raw) {
        if let Some(fields) = json_fields(block.trim()) {
            return finish(fields, outside, raw, schema);
        }
        let fields = key_values(block, schema);
        if !fields.is_empty() {
            return finish(fields, outside, raw, schema);
        }
    }
    // Unfenced key-value lines, as long as at least one known key is present.
    let fields = key_values(raw, schema);
    if fields.keys().any(|k| schema.fields.iter().any(|f| &f.name == k)) {
        return finish(fields, String::new(), raw, schema);
    }
    Err(BackendError::Parse { message: format!("{}: no structured block found", schema.name), raw: raw.to_string() })
}

fn finish(
    mut fields: BTreeMap<String, String>,
    outside: String,
    raw: &str,
    schema: &ReplySchema,
) -> Result<(BTreeMap<String, String>, String), BackendError> {
    schema.validate(&mut fields, raw)?;
    let evidence = match fields.remove("evidence") {
        Some(e) if !e.trim().is_empty() => e,
        _ if !outside.trim().is_empty() => outside.trim().to_string(),
        _ => raw.trim().to_string(),
    };
    Ok((fields, evidence))
}

fn json_fields(text: &str) -> Option<BTreeMap<String, String>> {
    if !text.starts_with('{') {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let obj = value.as_object()?;
    Some(obj.iter().map(|(k, v)| (k.to_ascii_lowercase(), json_scalar(v))).collect())
}

pub(super) fn json_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Contents of each ``` fence plus the prose outside all fences.
fn fenced_blocks(raw: &str) -> Vec<(&str, String)> {
    let mut blocks = Vec::new();
    let mut outside = String::new();
    let mut rest = raw;
    let mut inner = Vec::new();
    while let Some(start) = rest.find("```") {
        outside.push_str(&rest[..start]);
        let after = &rest[start + 3..];
        // Skip an info string such as ```reply or ```json.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                inner.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => {
                inner.push(body);
                rest = "";
            }
        }
    }
    outside.push_str(rest);
    for b in inner {
        blocks.push((b, outside.clone()));
    }
    blocks
}

fn key_values(text: &str, schema: &ReplySchema) -> BTreeMap<String, String> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut last: Option<String> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once(':') {
            let key = k.trim().trim_matches(|c| c == '*' || c == '-').trim().to_ascii_lowercase().replace(' ', "_");
            if !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && schema.knows(&key) {
                fields.insert(key.clone(), v.trim().to_string());
                last = Some(key);
                continue;
            }
        }
        if let Some(k) = &last {
            let entry = fields.get_mut(k).expect("last key inserted");
            if !entry.is_empty() {
                entry.push(' ');
            }
            entry.push_str(line);
        }
    }
    fields
}
