use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ground;
use crate::audit::cosine;
use crate::backends::{ChatBackend, Embedder, ReplySchema, TemplateSet};
use crate::ingest::TaskRubric;
use crate::model::{CallRecord, CanonicalModel, GapRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub concept_tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeCorpus {
    pub documents: Vec<KnowledgeDoc>,
}

impl KnowledgeCorpus {
    pub fn new(documents: Vec<KnowledgeDoc>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for d in &documents {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate knowledge document id {}", d.id)));
            }
        }
        Ok(Self { documents })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: KnowledgeCorpus = serde_json::from_str(text)?;
        Self::new(c.documents)
    }

    /// A single JSON bundle, or a directory of one-document JSON files.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
                .collect();
            files.sort();
            let mut docs = Vec::new();
            for f in files {
                let text = std::fs::read_to_string(&f)?;
                match serde_json::from_str::<KnowledgeCorpus>(&text) {
                    Ok(bundle) => docs.extend(bundle.documents),
                    Err(_) => docs.push(serde_json::from_str(&text)?),
                }
            }
            Self::new(docs)
        } else {
            Self::from_json(&std::fs::read_to_string(path)?)
        }
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeDoc> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// Concept tags a component key maps to, e.g. `vy-update` to
/// `{velocity, update, vy}`.
pub fn component_tags(component: &str) -> BTreeSet<String> {
    let base = component.split('#').next().unwrap_or(component);
    let (var, role) = match base.rsplit_once('-') {
        Some((v, r)) => (Some(v), r),
        None => (None, base),
    };
    let mut tags = BTreeSet::new();
    tags.insert(
        match role {
            "init" => "initialization",
            "update" => "update",
            "loop" => "loop",
            "conditional" => "conditional",
            other => other,
        }
        .to_string(),
    );
    if let Some(v) = var {
        tags.insert(v.to_string());
        let concept = match v {
            "position" | "pos" | "x" | "y" => Some("position"),
            "velocity" | "vel" | "vx" | "vy" | "speed" => Some("velocity"),
            "acceleration" | "accel" | "ax" | "ay" | "gravity" => Some("acceleration"),
            "dt" | "time" | "t" => Some("time"),
            _ => None,
        };
        if let Some(c) = concept {
            tags.insert(c.to_string());
        }
    }
    tags
}

/// Ranks corpus documents for a gap.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, corpus: &KnowledgeCorpus, gap: &GapRecord, k: usize) -> Result<Vec<String>>;
}

/// Tag-overlap count, ties broken by document id.
#[derive(Clone, Copy, Debug, Default)]
pub struct TagOverlapRetriever;

impl Retriever for TagOverlapRetriever {
    fn retrieve(&self, corpus: &KnowledgeCorpus, gap: &GapRecord, k: usize) -> Result<Vec<String>> {
        let tags = component_tags(&gap.component);
        let mut scored: Vec<(usize, &str)> = corpus
            .documents
            .iter()
            .map(|d| (d.concept_tags.iter().filter(|t| tags.contains(*t)).count(), d.id.as_str()))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
    }
}

/// Cosine between the gap description and each document, ties by id.
pub struct EmbeddingRetriever<'a> {
    pub embedder: &'a dyn Embedder,
}

impl Retriever for EmbeddingRetriever<'_> {
    fn retrieve(&self, corpus: &KnowledgeCorpus, gap: &GapRecord, k: usize) -> Result<Vec<String>> {
        if k == 0 || corpus.documents.is_empty() {
            return Ok(Vec::new());
        }
        let tags: Vec<String> = component_tags(&gap.component).into_iter().collect();
        let mut texts = vec![format!("{} {} {}", gap.component, gap.expected, tags.join(" "))];
        texts.extend(corpus.documents.iter().map(|d| format!("{} {} {}", d.title, d.body, d.concept_tags.join(" "))));
        let vecs = self.embedder.embed(&texts)?;
        let mut scored: Vec<(f64, &str)> = corpus
            .documents
            .iter()
            .zip(&vecs[1..])
            .map(|(d, v)| cosine(&vecs[0], v).map(|c| (c, d.id.as_str())))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFinding {
    pub component: String,
    pub expected: String,
    /// `None` when the student has no such component.
    pub observed: Option<String>,
    /// (document id, snippet) pairs, best first.
    pub retrieved: Vec<(String, String)>,
    pub evidence_text: String,
}

impl GapFinding {
    pub fn to_record(&self) -> GapRecord {
        GapRecord {
            component: self.component.clone(),
            expected: self.expected.clone(),
            observed: self.observed.clone(),
            retrieved_knowledge: self.retrieved.iter().map(|(id, _)| id.clone()).collect(),
        }
    }
}

fn snippet(body: &str) -> String {
    let first = body.split_inclusive('.').next().unwrap_or(body).trim();
    first.to_string()
}

/// Components the student is missing or has wrong, next step first.
///
/// A component with rubric criteria counts as correct when every criterion on
/// it is met; other components must equal the expert expression. Priority is
/// rubric criterion order, then remaining expert components by key.
pub fn find_gaps(
    student: &CanonicalModel,
    expert: Option<&CanonicalModel>,
    rubric: Option<&TaskRubric>,
    corpus: &KnowledgeCorpus,
    retriever: &dyn Retriever,
    k: usize,
    task: &crate::model::TaskId,
) -> Result<Vec<GapFinding>> {
    let expert = expert.ok_or_else(|| Error::NoExpertReference(task.clone()))?;
    let mut by_component: BTreeMap<&str, Vec<&crate::ingest::Predicate>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    if let Some(r) = rubric {
        for c in &r.criteria {
            by_component.entry(c.predicate.component()).or_default().push(&c.predicate);
        }
        order.extend(r.component_order().into_iter().filter(|k| expert.components.contains_key(*k)));
    }
    order.extend(expert.components.keys().map(String::as_str).filter(|k| !by_component.contains_key(k)));

    let mut out = Vec::new();
    for key in order {
        let expected = &expert.components[key];
        let observed = student.get(key);
        let correct = match by_component.get(key) {
            Some(preds) => preds.iter().all(|p| p.matches(student)),
            None => observed == Some(expected.as_str()),
        };
        if correct || observed == Some(expected.as_str()) {
            continue;
        }
        let mut record = GapRecord {
            component: key.to_string(),
            expected: expected.clone(),
            observed: observed.map(str::to_string),
            retrieved_knowledge: vec![],
        };
        let ids = retriever.retrieve(corpus, &record, k)?;
        let retrieved: Vec<(String, String)> = ids
            .iter()
            .filter_map(|id| corpus.get(id).map(|d| (d.id.clone(), snippet(&d.body))))
            .collect();
        record.retrieved_knowledge = ids;
        let titles: Vec<&str> = retrieved.iter().filter_map(|(id, _)| corpus.get(id).map(|d| d.title.as_str())).collect();
        let status = match &record.observed {
            None => format!("The {key} component is missing"),
            Some(o) => format!("The {key} component reads `{o}`, which does not match the reference"),
        };
        let evidence_text = if titles.is_empty() {
            format!("{status}.")
        } else {
            format!("{status}. Relevant notes: {}.", titles.join("; "))
        };
        out.push(GapFinding {
            component: record.component,
            expected: record.expected,
            observed: record.observed,
            retrieved,
            evidence_text,
        });
    }
    Ok(out)
}

/// Adds a backend-written explanation to the first gap's evidence.
pub fn explain_gap_llm(
    gap: &GapFinding,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> (GapFinding, Option<CallRecord>) {
    let Ok(template) = templates.get("knowledge") else { return (gap.clone(), None) };
    let retrieved: Vec<String> = gap.retrieved.iter().map(|(id, s)| format!("[{id}] {s}")).collect();
    let values = [
        ("component", gap.component.clone()),
        ("expected", gap.expected.clone()),
        ("observed", gap.observed.clone().unwrap_or_else(|| "(missing)".into())),
        ("retrieved", retrieved.join("\n")),
    ];
    let Ok(prompt) = template.render(&values.into_iter().collect()) else { return (gap.clone(), None) };
    let schema = ReplySchema::new("knowledge").required("explanation");
    match backend.complete(&prompt, &schema) {
        Ok(reply) => {
            let record = super::call_record("knowledge", &prompt, &reply.raw, &reply.model, reply.latency_ms);
            let explanation = reply.field("explanation").unwrap_or_default();
            let evidence_text = ground(&format!("{} {explanation}", gap.evidence_text), &[gap.component.as_str()]);
            (GapFinding { evidence_text, ..gap.clone() }, Some(record))
        }
        Err(e) => {
            let record = super::call_record("knowledge", &prompt, e.raw_reply().unwrap_or_default(), backend.model_name(), 0);
            (gap.clone(), Some(record))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> KnowledgeCorpus {
        let d = |id: &str, tags: &[&str]| KnowledgeDoc {
            id: id.into(),
            title: id.into(),
            body: format!("{id} body. More."),
            concept_tags: tags.iter().map(|t| t.to_string()).collect(),
        };
        KnowledgeCorpus::new(vec![
            d("b", &["velocity", "initialization"]),
            d("a", &["velocity", "initialization"]),
            d("c", &["velocity"]),
            d("z", &["loop"]),
        ])
        .unwrap()
    }

    fn model(pairs: &[(&str, &str)]) -> CanonicalModel {
        CanonicalModel { components: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    #[test]
    fn tags_from_component_keys() {
        let t = component_tags("vy-update");
        assert!(t.contains("velocity") && t.contains("update") && t.contains("vy"));
        assert_eq!(component_tags("loop"), BTreeSet::from(["loop".to_string()]));
    }

    #[test]
    fn tag_overlap_ranks_with_id_tiebreak() {
        let gap = GapRecord { component: "velocity-init".into(), expected: "velocity = 4".into(), observed: None, retrieved_knowledge: vec![] };
        let ids = TagOverlapRetriever.retrieve(&corpus(), &gap, 3).unwrap();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(TagOverlapRetriever.retrieve(&corpus(), &gap, 0).unwrap().is_empty());
    }

    #[test]
    fn gaps_follow_priority_and_vanish_on_expert() {
        let task: crate::model::TaskId = "t".parse().unwrap();
        let expert = model(&[("velocity-init", "velocity = 4"), ("loop", "x < 3")]);
        let none = find_gaps(&expert, Some(&expert), None, &corpus(), &TagOverlapRetriever, 3, &task).unwrap();
        assert!(none.is_empty());
        let student = model(&[("loop", "x < 3")]);
        let gaps = find_gaps(&student, Some(&expert), None, &corpus(), &TagOverlapRetriever, 3, &task).unwrap();
        assert_eq!(gaps.len(), 1);
        assert_eq!(gaps[0].component, "velocity-init");
        assert_eq!(gaps[0].retrieved[0], ("a".to_string(), "a body.".to_string()));
        assert!(matches!(
            find_gaps(&student, None, None, &corpus(), &TagOverlapRetriever, 3, &task),
            Err(Error::NoExpertReference(_))
        ));
    }
}
