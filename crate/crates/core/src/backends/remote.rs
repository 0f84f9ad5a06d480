use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::reply::parse_reply;
use super::{BackendError, BackendKind, ChatBackend, ReplySchema, StructuredReply};

const SYSTEM_PROMPT: &str = "You are part of a classroom tutoring system. Answer with a fenced block of \
`key: value` lines containing exactly the requested fields, plus an `evidence:` line explaining the \
observations your answer rests on.";

pub(super) fn agent(timeout: Duration) -> ureq::Agent {
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build();
    ureq::Agent::new_with_config(config)
}

/// `Bearer <token>` from the named environment variable. Tokens never appear
/// in config files, traces or error messages.
pub(super) fn bearer(env: Option<&str>) -> Result<Option<String>, BackendError> {
    match env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(|t| Some(format!("Bearer {t}")))
            .map_err(|_| BackendError::Config(format!("environment variable {var} is not set"))),
    }
}

pub(super) fn map_ureq(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(status) => BackendError::Http { status, body: String::new() },
        other => BackendError::Transport(other.to_string()),
    }
}

/// Vendor-neutral chat-completions client.
///
/// Sends `{"model", "messages"}` and reads `choices[0].message.content`.
/// Timeouts, transport failures and 5xx/429 responses are retried up to
/// `max_retries` times.
pub struct RemoteChatBackend {
    url: String,
    model: String,
    api_key_env: Option<String>,
    max_retries: u32,
    agent: ureq::Agent,
}

impl RemoteChatBackend {
    pub fn new(
        url: String,
        model: String,
        api_key_env: Option<String>,
        timeout_ms: u64,
        max_retries: u32,
    ) -> Result<Self, BackendError> {
        if url.trim().is_empty() {
            return Err(BackendError::Config("chat backend url is empty".into()));
        }
        Ok(Self { url, model, api_key_env, max_retries, agent: agent(Duration::from_millis(timeout_ms)) })
    }

    fn call(&self, prompt: &str) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = bearer(self.api_key_env.as_deref())? {
            req = req.header("Authorization", &token);
        }
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
        });
        let mut resp = req.send_json(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if status >= 400 {
            return Err(BackendError::Http { status, body: text });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Parse { message: e.to_string(), raw: text.clone() })?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(BackendError::Parse { message: "response has no choices[0].message.content".into(), raw: text })
    }
}

impl ChatBackend for RemoteChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, schema: &ReplySchema) -> Result<StructuredReply, BackendError> {
        let started = Instant::now();
        let mut attempt = 0;
        let raw = loop {
            match self.call(prompt) {
                Ok(raw) => break raw,
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(100 * u64::from(attempt)));
                }
                Err(e) => return Err(e),
            }
        };
        let (fields, evidence_text) = parse_reply(&raw, schema)?;
        Ok(StructuredReply {
            fields,
            evidence_text,
            raw,
            model: self.model.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
