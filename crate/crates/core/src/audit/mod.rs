//! Interpretability audit over evidence traces.
//!
//! Three links are scored, each against a permutation baseline:
//!
//! | link | left | right | statistic |
//! |------|------|-------|-----------|
//! | Grounding | processed-action log text | concatenated evidence | keyword recall |
//! | Alignment | dialogue-state summary + evidence | policy rationale | embedding cosine |
//! | Faithfulness | policy rationale | talk move | embedding cosine |

pub mod permutation;
pub mod recall;
pub mod stem;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::Embedder;
use crate::model::{checksum, EvidenceTrace};
use crate::{Error, Result};

pub use permutation::{permutation_test, PermutationMode, PermutationOutcome};
pub use recall::{keyword_recall, Recall, TokenFilter};

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Invalid(format!("dimension mismatch {} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("ZERO_VECTOR: cosine of a zero vector is undefined".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One grounding pair per trace.
    #[default]
    PerTrace,
    /// Logs and evidence concatenated per session before scoring.
    PerSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub filter: TokenFilter,
    pub n1: usize,
    pub n2: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: PermutationMode,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { filter: TokenFilter::default(), n1: 100, n2: 1000, seed: 42, mode: PermutationMode::Auto, pooling: Pooling::PerTrace }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Grounding,
    Alignment,
    Faithfulness,
}

impl Link {
    pub fn component(self) -> &'static str {
        match self {
            Link::Grounding => "Grounding (Data -> Evidence)",
            Link::Alignment => "Alignment (Evidence -> Decision)",
            Link::Faithfulness => "Faithfulness (Decision -> Feedback)",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            Link::Grounding => "Keyword Recall",
            _ => "Embedding Similarity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub link: Link,
    pub component: String,
    pub metric: String,
    pub pairs: usize,
    #[serde(flatten)]
    pub outcome: PermutationOutcome,
    /// Grounding pairs whose log side had no qualifying tokens.
    #[serde(default)]
    pub vacuous_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trace_count: usize,
    pub embedder: String,
    pub config: AuditConfig,
    /// How the alignment left-hand text is assembled.
    pub alignment_left: String,
    pub config_digest: String,
    pub links: Vec<LinkResult>,
}

impl AuditReport {
    pub fn link(&self, link: Link) -> &LinkResult {
        self.links.iter().find(|l| l.link == link).expect("all three links are always reported")
    }

    /// Plain-text table: component, metric, actual, random, p-value.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<38} {:<22} {:>7} {:>7} {:>9}", "Trace Component", "Metric", "Actual", "Random", "p-value");
        for l in &self.links {
            let _ = writeln!(
                out,
                "{:<38} {:<22} {:>7.3} {:>7.3} {:>9.4}",
                l.component, l.metric, l.outcome.observed, l.outcome.baseline, l.outcome.p_value
            );
        }
        out
    }
}

const ALIGNMENT_LEFT: &str = "dialogue_state.summary + ' ' + evidence values joined in agent order";

/// Scores the three interpretability links over a trace set.
pub fn audit(traces: &[EvidenceTrace], embedder: &dyn Embedder, config: &AuditConfig) -> Result<AuditReport> {
    let incomplete: Vec<String> =
        traces.iter().filter(|t| !t.is_complete()).map(|t| t.trace.to_string()).collect();
    if !incomplete.is_empty() {
        return Err(Error::IncompleteTrace(incomplete));
    }
    if traces.len() < 2 {
        return Err(Error::InsufficientData(format!("audit needs at least 2 traces, got {}", traces.len())));
    }

    let grounding = grounding_link(traces, config)?;

    let mut texts: Vec<String> = Vec::with_capacity(traces.len() * 3);
    for t in traces {
        texts.push(format!("{} {}", t.dialogue_state.summary, t.evidence_text()));
    }
    for t in traces {
        texts.push(t.decision.rationale.clone());
    }
    for t in traces {
        texts.push(t.feedback.clone());
    }
    let vecs = embedder.embed(&texts)?;
    let k = traces.len();
    let (evidence_vecs, rest) = vecs.split_at(k);
    let (rationale_vecs, feedback_vecs) = rest.split_at(k);

    let alignment = cosine_link(Link::Alignment, evidence_vecs, rationale_vecs, config.n2, config.seed.wrapping_add(1), config.mode)?;
    let faithfulness =
        cosine_link(Link::Faithfulness, rationale_vecs, feedback_vecs, config.n2, config.seed.wrapping_add(2), config.mode)?;

    let digest_src = serde_json::json!({
        "config": config,
        "embedder": embedder.name(),
        "dimension": embedder.dimension(),
        "alignment_left": ALIGNMENT_LEFT,
        "stemmer": "porter-reference",
    });
    Ok(AuditReport {
        trace_count: traces.len(),
        embedder: embedder.name().to_string(),
        config: config.clone(),
        alignment_left: ALIGNMENT_LEFT.into(),
        config_digest: checksum(digest_src.to_string().as_bytes())[..16].to_string(),
        links: vec![grounding, alignment, faithfulness],
    })
}

fn grounding_link(traces: &[EvidenceTrace], config: &AuditConfig) -> Result<LinkResult> {
    let units: Vec<(String, String)> = match config.pooling {
        Pooling::PerTrace => traces.iter().map(|t| (t.input_snapshot.log_text(), t.evidence_text())).collect(),
        Pooling::PerSession => {
            let mut order: Vec<String> = Vec::new();
            let mut grouped: std::collections::HashMap<String, (String, String)> = Default::default();
            for t in traces {
                let key = t.session.to_string();
                let entry = grouped.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    (String::new(), String::new())
                });
                entry.0.push_str(&t.input_snapshot.log_text());
                entry.0.push(' ');
                entry.1.push_str(&t.evidence_text());
                entry.1.push(' ');
            }
            order.into_iter().map(|k| grouped.remove(&k).expect("grouped above")).collect()
        }
    };
    let logs: Vec<BTreeSet<String>> = units.iter().map(|(l, _)| config.filter.stems(l)).collect();
    let evidence: Vec<BTreeSet<String>> = units.iter().map(|(_, e)| config.filter.stems(e)).collect();
    let k = units.len();
    let matrix: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| (0..k).map(|j| recall::recall_of_sets(&logs[i], &evidence[j]).value).collect())
        .collect();
    let vacuous_pairs = logs.iter().filter(|l| l.is_empty()).count();
    let outcome = permutation_test(k, |i, j| matrix[i][j], config.n1, config.seed, config.mode)?;
    Ok(LinkResult {
        link: Link::Grounding,
        component: Link::Grounding.component().into(),
        metric: Link::Grounding.metric().into(),
        pairs: k,
        outcome,
        vacuous_pairs,
    })
}

fn cosine_link(link: Link, left: &[Vec<f64>], right: &[Vec<f64>], n: usize, seed: u64, mode: PermutationMode) -> Result<LinkResult> {
    let k = left.len();
    let matrix: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| cosine(&left[i], &right[j])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let outcome = permutation_test(k, |i, j| matrix[i][j], n, seed, mode)?;
    Ok(LinkResult { link, component: link.component().into(), metric: link.metric().into(), pairs: k, outcome, vacuous_pairs: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 1.0]).is_err());
    }
}
