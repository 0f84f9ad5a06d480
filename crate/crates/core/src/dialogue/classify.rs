use crate::backends::{complete_with_retry, BackendError, ChatBackend, ReplySchema, TemplateSet};
use crate::model::{CallRecord, DialogueState, DialogueStateLabel, TraceFlag};

/// Cue phrases per label, tried in this order. Matching is on whole words
/// after lowercasing and stripping punctuation, so "don't" is written "dont".
const CUES: [(DialogueStateLabel, &[&str]); 4] = [
    (
        DialogueStateLabel::RequestsSolution,
        &[
            "tell me the answer",
            "tell us the answer",
            "just tell",
            "give me the answer",
            "give us the answer",
            "whats the answer",
            "what is the answer",
            "the solution",
            "do it for us",
            "do it for me",
            "show us the code",
            "show me the code",
            "what do we type",
            "what should we put",
            "what do i put",
            "what do we put",
        ],
    ),
    (
        DialogueStateLabel::ExpressesConfusion,
        &[
            "confused",
            "confusing",
            "dont understand",
            "dont get",
            "do not understand",
            "no idea",
            "not sure",
            "stuck",
            "lost",
            "makes no sense",
            "doesnt make sense",
            "doesnt work",
            "isnt working",
            "not working",
            "why doesnt",
            "why isnt",
            "help",
        ],
    ),
    (
        DialogueStateLabel::DemonstratesUnderstanding,
        &[
            "because",
            "since",
            "so that",
            "which means",
            "that means",
            "means that",
            "is the change",
            "is the rate",
            "depends on",
            "has to be",
            "needs to be",
            "otherwise",
            "therefore",
            "so i",
            "so we",
            "so it",
            "so the",
        ],
    ),
    (
        DialogueStateLabel::ReportsProgress,
        &[
            "we added",
            "we set",
            "we changed",
            "we updated",
            "we fixed",
            "we ran",
            "we removed",
            "we made",
            "we finished",
            "i added",
            "i set",
            "i changed",
            "i fixed",
            "it works",
            "its working",
            "done",
            "finished",
            "now it",
        ],
    ),
];

const QUESTION_OPENERS: [&str; 9] = ["what", "why", "how", "when", "does", "is", "should", "can", "would"];

fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn has_phrase(padded: &str, phrase: &str) -> bool {
    padded.contains(&format!(" {phrase} "))
}

fn excerpt(message: &str) -> String {
    let m = message.split_whitespace().collect::<Vec<_>>().join(" ");
    if m.chars().count() <= 160 {
        m
    } else {
        let cut: String = m.chars().take(157).collect();
        format!("{cut}...")
    }
}

/// Summary sentence for a label, quoting the message so the summary keeps
/// the students' own vocabulary.
pub fn summarize(label: DialogueStateLabel, message: &str) -> String {
    let lead = match label {
        DialogueStateLabel::DemonstratesUnderstanding => "The students explain their reasoning",
        DialogueStateLabel::RequestsSolution => "The students ask to be given the solution",
        DialogueStateLabel::AsksConceptualQuestion => "The students ask a conceptual question",
        DialogueStateLabel::ExpressesConfusion => "The students say they are confused or stuck",
        DialogueStateLabel::ReportsProgress => "The students report progress on their model",
        DialogueStateLabel::Other => "The students send a message",
    };
    format!("{lead}: \"{}\"", excerpt(message))
}

/// Keyword reference classifier. Returns the label and the cue that decided it.
pub fn classify_keywords(message: &str) -> (DialogueState, String) {
    let norm = normalize(message);
    let padded = format!(" {norm} ");
    let question = message.trim_end().ends_with('?')
        || norm.split(' ').next().is_some_and(|w| QUESTION_OPENERS.contains(&w));
    for (label, cues) in CUES {
        // An explanation phrased as a question is a question.
        if label == DialogueStateLabel::DemonstratesUnderstanding && question {
            continue;
        }
        if let Some(cue) = cues.iter().find(|c| has_phrase(&padded, c)) {
            let state = DialogueState { label, summary: summarize(label, message) };
            return (state, format!("The message contains \"{cue}\"."));
        }
    }
    let (label, why) = if question {
        (DialogueStateLabel::AsksConceptualQuestion, "The message is a question.".to_string())
    } else {
        (DialogueStateLabel::Other, "No cue for any specific dialogue state.".to_string())
    };
    (DialogueState { label, summary: summarize(label, message) }, why)
}

/// Result of one classification, whichever path produced it.
#[derive(Clone, Debug)]
pub struct Classification {
    pub state: DialogueState,
    pub evidence_text: String,
    pub call: Option<CallRecord>,
    pub flags: Vec<TraceFlag>,
}

/// Backend classification. A reply with a label outside the closed set gives
/// OTHER with [`TraceFlag::MalformedBackendOutput`]; a transport failure after
/// retries falls back to the keyword classifier with
/// [`TraceFlag::BackendFailure`].
pub fn classify_with_backend(
    message: &str,
    history: &str,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    max_retries: u32,
) -> Result<Classification, BackendError> {
    let template = templates.get("dialogue_state")?;
    let prompt = template.render(&[("history", history.to_string()), ("message", message.to_string())].into_iter().collect())?;
    let schema = ReplySchema::new("dialogue_state")
        .one_of("label", DialogueStateLabel::ALL.iter().map(|l| l.label()))
        .optional("summary");
    let record = |raw: &str, model: &str, latency: u64| super::super::agents::call_record("dialogue_state", &prompt, raw, model, latency);
    match complete_with_retry(backend, &prompt, &schema, max_retries) {
        Ok(reply) => {
            let label = reply.field("label").and_then(DialogueStateLabel::parse).unwrap_or(DialogueStateLabel::Other);
            let summary = reply
                .field("summary")
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .unwrap_or_else(|| summarize(label, message));
            let evidence_text = if reply.evidence_text.trim().is_empty() {
                format!("Classified as {label}.")
            } else {
                reply.evidence_text.trim().to_string()
            };
            Ok(Classification {
                state: DialogueState { label, summary },
                evidence_text,
                call: Some(record(&reply.raw, &reply.model, reply.latency_ms)),
                flags: vec![],
            })
        }
        Err(BackendError::Parse { message: why, raw }) => Ok(Classification {
            state: DialogueState { label: DialogueStateLabel::Other, summary: summarize(DialogueStateLabel::Other, message) },
            evidence_text: format!("The classifier reply could not be used ({why}), so the state defaults to OTHER."),
            call: Some(record(&raw, backend.model_name(), 0)),
            flags: vec![TraceFlag::MalformedBackendOutput],
        }),
        Err(e @ BackendError::ScriptExhausted { .. }) => Err(e),
        Err(e) => {
            let (state, cue) = classify_keywords(message);
            Ok(Classification {
                state,
                evidence_text: format!("The classifier backend failed ({e}); keyword rules were used. {cue}"),
                call: Some(record(e.raw_reply().unwrap_or_default(), backend.model_name(), 0)),
                flags: vec![TraceFlag::BackendFailure],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DialogueStateLabel::*;

    fn label(m: &str) -> DialogueStateLabel {
        classify_keywords(m).0.label
    }

    #[test]
    fn reference_examples() {
        assert_eq!(label("velocity is the change in position over time, so I set it before the loop"), DemonstratesUnderstanding);
        assert_eq!(label("just tell me the answer"), RequestsSolution);
        assert_eq!(label("I'm so confused, nothing moves"), ExpressesConfusion);
        assert_eq!(label("What does acceleration do to velocity?"), AsksConceptualQuestion);
        assert_eq!(label("We added the loop and it works now"), ReportsProgress);
        assert_eq!(label("ok"), Other);
    }

    #[test]
    fn why_questions_are_not_explanations() {
        assert_eq!(label("why does it stop because of the condition?"), AsksConceptualQuestion);
    }

    #[test]
    fn summaries_are_never_empty() {
        for l in DialogueStateLabel::ALL {
            assert!(summarize(l, "").len() > 10);
        }
    }
}
