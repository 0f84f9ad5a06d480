//! Pluggable reasoning backends.
//!
//! This module is the only place that talks to reasoning services over the
//! network. Everything else sees the [`ChatBackend`] and [`Embedder`]
//! traits, and tests drive the engine through [`ScriptedBackend`] replay.

mod embed;
mod prompt;
mod remote;
mod reply;
mod scripted;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{HashEmbedder, RemoteEmbedder, DEFAULT_HASH_DIMENSION};
pub use prompt::{PromptTemplate, TemplateSet};
pub use remote::RemoteChatBackend;
pub use reply::parse_reply;
pub use scripted::ScriptedBackend;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("could not parse backend reply: {message}")]
    Parse { message: String, raw: String },
    #[error("script {script} exhausted after {consumed} replies")]
    ScriptExhausted { script: String, consumed: usize },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("prompt template {template}: slot {slot} not filled")]
    UnfilledSlot { template: String, slot: String },
}

impl BackendError {
    /// Timeouts, transport failures and 5xx/429 responses may succeed on retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }

    pub fn raw_reply(&self) -> Option<&str> {
        match self {
            BackendError::Parse { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    RemoteHttp,
    ScriptedReplay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub required: bool,
    /// Closed value set; values are matched case-insensitively and stored
    /// in their canonical spelling.
    pub allowed: Option<Vec<String>>,
}

/// The fields a caller expects back from a completion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplySchema {
    pub name: String,
    pub fields: Vec<FieldSpec>,
}

impl ReplySchema {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), fields: Vec::new() }
    }

    pub fn required(mut self, field: &str) -> Self {
        self.fields.push(FieldSpec { name: field.into(), required: true, allowed: None });
        self
    }

    pub fn optional(mut self, field: &str) -> Self {
        self.fields.push(FieldSpec { name: field.into(), required: false, allowed: None });
        self
    }

    pub fn one_of<I, S>(mut self, field: &str, allowed: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fields.push(FieldSpec {
            name: field.into(),
            required: true,
            allowed: Some(allowed.into_iter().map(Into::into).collect()),
        });
        self
    }

    pub fn knows(&self, field: &str) -> bool {
        field == "evidence" || self.fields.iter().any(|f| f.name == field)
    }

    /// Checks required fields and closed value sets, canonicalizing values.
    pub fn validate(&self, fields: &mut BTreeMap<String, String>, raw: &str) -> Result<(), BackendError> {
        for spec in &self.fields {
            match fields.get_mut(&spec.name) {
                None if spec.required => {
                    return Err(BackendError::Parse {
                        message: format!("{}: missing field {}", self.name, spec.name),
                        raw: raw.to_string(),
                    })
                }
                None => {}
                Some(v) if spec.required && v.trim().is_empty() => {
                    return Err(BackendError::Parse {
                        message: format!("{}: empty field {}", self.name, spec.name),
                        raw: raw.to_string(),
                    })
                }
                Some(v) => {
                    if let Some(allowed) = &spec.allowed {
                        let norm = v.trim().to_ascii_uppercase().replace([' ', '-'], "_");
                        match allowed.iter().find(|a| a.eq_ignore_ascii_case(&norm)) {
                            Some(a) => *v = a.clone(),
                            None => {
                                return Err(BackendError::Parse {
                                    message: format!("{}: value {v:?} not allowed for {}", self.name, spec.name),
                                    raw: raw.to_string(),
                                })
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A parsed completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredReply {
    pub fields: BTreeMap<String, String>,
    /// The backend's stated reasoning for its answer.
    pub evidence_text: String,
    pub raw: String,
    pub model: String,
    pub latency_ms: u64,
}

impl StructuredReply {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn model_name(&self) -> &str;
    fn complete(&self, prompt: &str, schema: &ReplySchema) -> Result<StructuredReply, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Unit-normalized vectors, one per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChatBackendConfig {
    RemoteHttp {
        url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
    ScriptedReplay {
        script: PathBuf,
        #[serde(default)]
        model: Option<String>,
    },
}

impl ChatBackendConfig {
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        Ok(match self {
            ChatBackendConfig::RemoteHttp { url, model, api_key_env, timeout_ms, max_retries } => Arc::new(
                RemoteChatBackend::new(url.clone(), model.clone(), api_key_env.clone(), *timeout_ms, *max_retries)?,
            ),
            ChatBackendConfig::ScriptedReplay { script, model } => {
                let mut b = ScriptedBackend::from_jsonl_file(script)?;
                if let Some(m) = model {
                    b = b.with_model(m.clone());
                }
                Arc::new(b)
            }
        })
    }
}

fn default_dimension() -> usize {
    DEFAULT_HASH_DIMENSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbeddingConfig {
    DeterministicHash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    RemoteHttp {
        url: String,
        model: String,
        dimension: usize,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::DeterministicHash { dimension: DEFAULT_HASH_DIMENSION }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, BackendError> {
        Ok(match self {
            EmbeddingConfig::DeterministicHash { dimension } => Arc::new(HashEmbedder::new(*dimension)?),
            EmbeddingConfig::RemoteHttp { url, model, dimension, api_key_env, timeout_ms } => Arc::new(
                RemoteEmbedder::new(url.clone(), model.clone(), *dimension, api_key_env.clone(), *timeout_ms)?,
            ),
        })
    }
}

/// Calls `complete`, retrying retryable failures up to `max_retries` times.
pub fn complete_with_retry(
    backend: &dyn ChatBackend,
    prompt: &str,
    schema: &ReplySchema,
    max_retries: u32,
) -> Result<StructuredReply, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(prompt, schema) {
            Err(e) if e.is_retryable() && attempt < max_retries => attempt += 1,
            other => return other,
        }
    }
}
