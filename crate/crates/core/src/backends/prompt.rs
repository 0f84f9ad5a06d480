use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use std::sync::LazyLock;

use super::BackendError;
use crate::model::checksum;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{\s*([a-z_][a-z0-9_]*)\s*\}\}").expect("valid regex"));

/// A prompt with `{{slot}}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self { name: name.into(), text: text.into() }
    }

    pub fn slots(&self) -> BTreeSet<String> {
        SLOT.captures_iter(&self.text).map(|c| c[1].to_string()).collect()
    }

    /// SHA-256 of the template text, recorded in trace metadata.
    pub fn checksum(&self) -> String {
        checksum(self.text.as_bytes())
    }

    /// Fills every slot. Missing values are an error; extra values are ignored.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, BackendError> {
        for slot in self.slots() {
            if !values.contains_key(slot.as_str()) {
                return Err(BackendError::UnfilledSlot { template: self.name.clone(), slot });
            }
        }
        Ok(SLOT.replace_all(&self.text, |c: &regex::Captures<'_>| values[&c[1]].clone()).into_owned())
    }
}

const BUNDLED: [(&str, &str); 6] = [
    ("dialogue_state", include_str!("../../templates/dialogue_state.txt")),
    ("policy", include_str!("../../templates/policy.txt")),
    ("talk_move", include_str!("../../templates/talk_move.txt")),
    ("strategy", include_str!("../../templates/strategy.txt")),
    ("assessment", include_str!("../../templates/assessment.txt")),
    ("knowledge", include_str!("../../templates/knowledge.txt")),
];

/// Named prompt templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self {
            templates: BUNDLED.iter().map(|(n, t)| (n.to_string(), PromptTemplate::new(*n, *t))).collect(),
        }
    }

    /// Bundled templates overridden by any `<name>.txt` files in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, BackendError> {
        let mut set = Self::bundled();
        let entries = std::fs::read_dir(dir).map_err(|e| BackendError::Config(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| BackendError::Config(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let text =
                std::fs::read_to_string(&path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
            set.templates.insert(name.to_string(), PromptTemplate::new(name, text));
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, BackendError> {
        self.templates.get(name).ok_or_else(|| BackendError::Config(format!("no prompt template named {name}")))
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(n, t)| (n.clone(), t.checksum())).collect()
    }
}
