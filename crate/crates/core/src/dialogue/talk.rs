use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use crate::audit::recall::tokenize;
use crate::audit::stem::stem;
use crate::backends::{complete_with_retry, BackendError, ChatBackend, ReplySchema, TemplateSet};
use crate::ingest::canonical::normalize_block;
use crate::ingest::{TaskRubric, TranslationTable};
use crate::model::{CallRecord, GapRecord, PolicyKind, TraceFlag};

static ASSIGNMENT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^,;:?!\n]+?)\s*(?:[,;:?!\n]|\.\s|\.$|$)").expect("valid regex")
});

fn compact(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}

/// Checks generated text against the pedagogical guardrails of one task.
#[derive(Clone, Debug)]
pub struct Guardrails {
    /// Rubric answers in compact lowercase form (whitespace removed).
    banned: BTreeSet<String>,
    /// Rubric answers in normalized expression form.
    banned_normalized: BTreeSet<String>,
    verbs: BTreeSet<String>,
    verb_stems: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuardrailViolation {
    pub reason: String,
}

impl Guardrails {
    pub fn new(rubric: Option<&TaskRubric>, table: &TranslationTable) -> Self {
        let answers = rubric.map(TaskRubric::answer_expressions).unwrap_or_default();
        let verbs = table.action_verbs();
        Self {
            banned: answers.iter().map(|a| compact(a)).filter(|a| !a.is_empty()).collect(),
            banned_normalized: answers.iter().map(|a| normalize_block(a).1).collect(),
            verb_stems: verbs.iter().map(|v| stem(v)).collect(),
            verbs,
        }
    }

    pub fn banned_answers(&self) -> impl Iterator<Item = &str> {
        self.banned.iter().map(String::as_str)
    }

    /// A rubric answer the text gives away, if any. Matches the answer's
    /// characters ignoring whitespace and case, and also any `name = ...`
    /// segment whose normalized form equals a normalized answer.
    pub fn leaked_answer(&self, text: &str) -> Option<String> {
        let c = compact(text);
        if let Some(hit) = self.banned.iter().find(|b| c.contains(b.as_str())) {
            return Some(hit.clone());
        }
        ASSIGNMENT.captures_iter(text).find_map(|cap| {
            let candidate = normalize_block(&format!("{} = {}", &cap[1], cap[2].trim())).1;
            self.banned_normalized.contains(&candidate).then_some(candidate)
        })
    }

    pub fn mentions_action(&self, text: &str) -> bool {
        tokenize(text).any(|t| self.verbs.iter().any(|v| t.starts_with(v.as_str())) || self.verb_stems.contains(&stem(&t)))
    }

    pub fn check(&self, policy: PolicyKind, text: &str) -> Result<(), GuardrailViolation> {
        if text.trim().is_empty() {
            return Err(GuardrailViolation { reason: "the talk move is empty".into() });
        }
        if policy == PolicyKind::ProbeUnderstanding {
            if let Some(a) = self.leaked_answer(text) {
                return Err(GuardrailViolation { reason: format!("a probing move must not state the answer `{a}`") });
            }
        }
        if policy == PolicyKind::SuggestAction && !self.mentions_action(text) {
            return Err(GuardrailViolation {
                reason: "a suggestion must name a concrete workspace action (add, set, update, change, remove or run)".into(),
            });
        }
        Ok(())
    }
}

/// Readable name of a component key, e.g. `velocity-init` gives
/// "velocity initialization".
pub fn component_phrase(key: &str) -> String {
    let key = key.split('#').next().unwrap_or(key);
    match key.rsplit_once('-') {
        Some((var, "init")) => format!("{var} initialization"),
        Some((var, "update")) => format!("{var} update"),
        Some((var, suffix)) => format!("{var} {suffix}"),
        None => match key {
            "loop" => "simulation loop".into(),
            "conditional" => "conditional check".into(),
            other => other.to_string(),
        },
    }
}

fn suggested_action(gap: Option<&GapRecord>) -> String {
    let Some(g) = gap else {
        return "run the simulation and compare what happens with what you expect".into();
    };
    let key = g.component.split('#').next().unwrap_or(&g.component);
    let missing = g.observed.is_none();
    match key.rsplit_once('-') {
        Some((var, "init")) if missing => format!("add a block that sets the starting value of {var}"),
        Some((var, "init")) => format!("change the starting value you set for {var} and check its units"),
        Some((var, "update")) if missing => format!("add a block that updates {var} inside the simulation loop"),
        Some((var, "update")) => format!("update the block that changes {var} inside the simulation loop"),
        _ if key == "loop" && missing => "add a simulation loop around the update blocks".into(),
        _ if key == "loop" => "change the condition that ends the simulation loop".into(),
        _ if key == "conditional" && missing => "add a conditional check for when the motion should change".into(),
        _ if key == "conditional" => "change the condition in your conditional check".into(),
        _ => format!("update the {} block", component_phrase(key)),
    }
}

/// Deterministic move for a policy. Always passes the guardrails, so it is
/// also the last-resort fallback when generation fails.
pub fn templated_move(policy: PolicyKind, focus: Option<&GapRecord>, variant: usize) -> String {
    let subject = focus.map(|g| format!("the {}", component_phrase(&g.component))).unwrap_or_else(|| "each part".into());
    match policy {
        PolicyKind::ProbeUnderstanding => {
            let openers = ["Good effort so far.", "You are putting in real work.", "Nice thinking so far."];
            format!(
                "{} Before I help, a question to check your understanding: how should {subject} work in your model, and why do you think so?",
                openers[variant % openers.len()]
            )
        }
        PolicyKind::SuggestAction => {
            let openers = ["You are making progress.", "You are close.", "Keep going, you can do this."];
            format!(
                "{} Here is one concrete action to try in the workspace: {}. Then run the simulation and check the result.",
                openers[variant % openers.len()],
                suggested_action(focus)
            )
        }
        PolicyKind::PushLimit => {
            let challenges = [
                "what would change if the time step were ten times smaller",
                "what would the motion look like if the starting velocity were doubled",
                "how could you make the simulation stop at exactly the right moment",
            ];
            format!(
                "Great work, your model is coming together. Here is a harder challenge: {}? Predict the answer first, then run the simulation to test your idea.",
                challenges[variant % challenges.len()]
            )
        }
    }
}

/// What the talk-move generator sees.
#[derive(Clone, Debug)]
pub struct TalkBundle<'a> {
    pub policy: PolicyKind,
    pub rationale: &'a str,
    pub state_summary: &'a str,
    pub evidence: &'a str,
    pub focus: Option<&'a GapRecord>,
    pub history: &'a str,
    pub variant: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TalkOutcome {
    pub text: String,
    pub evidence_text: String,
    pub calls: Vec<CallRecord>,
    pub flags: Vec<TraceFlag>,
}

/// Generates a move with the backend under guardrails: one regeneration on a
/// violation or unusable reply, then the templated move. Without a backend
/// the templated move is used directly.
pub fn generate_talk_move(
    bundle: &TalkBundle<'_>,
    backend: Option<&dyn ChatBackend>,
    templates: &TemplateSet,
    guardrails: &Guardrails,
    max_retries: u32,
) -> Result<TalkOutcome, BackendError> {
    let fallback = |mut out: TalkOutcome| {
        out.text = templated_move(bundle.policy, bundle.focus, bundle.variant);
        out.evidence_text = format!("Templated {} move addressing {}.", bundle.policy, focus_name(bundle.focus));
        out
    };
    let Some(backend) = backend else {
        return Ok(fallback(TalkOutcome::default()));
    };
    let template = templates.get("talk_move")?;
    let gaps = bundle
        .focus
        .map(|g| format!("{} (currently {})", g.component, g.observed.as_deref().unwrap_or("missing")))
        .unwrap_or_else(|| "none".into());
    let values = [
        ("policy", bundle.policy.label().to_string()),
        ("rationale", bundle.rationale.to_string()),
        ("state", bundle.state_summary.to_string()),
        ("evidence", bundle.evidence.to_string()),
        ("gaps", gaps),
        ("history", bundle.history.to_string()),
    ];
    let base_prompt = template.render(&values.into_iter().collect())?;
    let schema = ReplySchema::new("talk_move").required("text");

    let mut out = TalkOutcome::default();
    let mut prompt = base_prompt.clone();
    for attempt in 0..2 {
        let reply = match complete_with_retry(backend, &prompt, &schema, max_retries) {
            Ok(r) => r,
            Err(e @ BackendError::ScriptExhausted { .. }) => return Err(e),
            Err(BackendError::Parse { message, raw }) => {
                out.calls.push(crate::agents::call_record("talk_move", &prompt, &raw, backend.model_name(), 0));
                push_flag(&mut out.flags, TraceFlag::MalformedBackendOutput);
                if attempt == 0 {
                    push_flag(&mut out.flags, TraceFlag::GuardrailRegenerated);
                    prompt = format!("{base_prompt}\n\nYour previous reply could not be parsed ({message}). Use the fenced block format.");
                }
                continue;
            }
            Err(e) => {
                out.calls.push(crate::agents::call_record("talk_move", &prompt, e.raw_reply().unwrap_or_default(), backend.model_name(), 0));
                push_flag(&mut out.flags, TraceFlag::BackendFailure);
                break;
            }
        };
        out.calls.push(crate::agents::call_record("talk_move", &prompt, &reply.raw, &reply.model, reply.latency_ms));
        let text = reply.field("text").unwrap_or_default().trim().to_string();
        match guardrails.check(bundle.policy, &text) {
            Ok(()) => {
                out.text = text;
                out.evidence_text = reply.evidence_text.trim().to_string();
                return Ok(out);
            }
            Err(v) if attempt == 0 => {
                push_flag(&mut out.flags, TraceFlag::GuardrailRegenerated);
                prompt = format!("{base_prompt}\n\nYour previous reply was rejected: {}. Write a new reply that follows every rule.", v.reason);
            }
            Err(_) => {}
        }
    }
    push_flag(&mut out.flags, TraceFlag::FallbackMove);
    Ok(fallback(out))
}

fn focus_name(focus: Option<&GapRecord>) -> String {
    focus.map(|g| g.component.clone()).unwrap_or_else(|| "the whole model".into())
}

fn push_flag(flags: &mut Vec<TraceFlag>, f: TraceFlag) {
    if !flags.contains(&f) {
        flags.push(f);
    }
}
