//! Task content: translation table, rubrics, expert references, knowledge.
//!
//! The bundled catalog ships three kinematics tasks. Their rubrics and expert
//! models are reconstructions written for this engine, not copies of any
//! published course material.

use std::collections::BTreeMap;
use std::path::Path;

use crate::agents::KnowledgeCorpus;
use crate::ingest::{canonicalize, to_model_state, TaskRubric, TranslationTable};
use crate::model::{CanonicalModel, TaskId};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub rubric: TaskRubric,
    pub expert: Option<CanonicalModel>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    pub table: TranslationTable,
    pub tasks: BTreeMap<TaskId, TaskBundle>,
    pub corpus: KnowledgeCorpus,
}

const TABLE: &str = include_str!("../fixtures/translation_table.json");
const CORPUS: &str = include_str!("../fixtures/knowledge/corpus.json");
const TASKS: [(&str, &str, &str); 3] = [
    (
        "truck-constant-velocity",
        include_str!("../fixtures/rubrics/truck-constant-velocity.json"),
        include_str!("../fixtures/experts/truck-constant-velocity.json"),
    ),
    (
        "truck-acceleration",
        include_str!("../fixtures/rubrics/truck-acceleration.json"),
        include_str!("../fixtures/experts/truck-acceleration.json"),
    ),
    ("drone-2d", include_str!("../fixtures/rubrics/drone-2d.json"), include_str!("../fixtures/experts/drone-2d.json")),
];

/// Parses an expert reference and re-canonicalizes it, so hand-written
/// references need not already be in normal form.
pub fn parse_expert(text: &str, task: &TaskId) -> Result<CanonicalModel> {
    let raw: CanonicalModel = serde_json::from_str(text)?;
    Ok(canonicalize(&to_model_state(&raw, task.clone(), 0)))
}

impl Catalog {
    pub fn bundled() -> Self {
        let mut tasks = BTreeMap::new();
        for (id, rubric, expert) in TASKS {
            let task: TaskId = id.parse().expect("bundled task id");
            let rubric = TaskRubric::from_json(rubric).expect("bundled rubric is valid");
            let expert = parse_expert(expert, &task).expect("bundled expert is valid");
            tasks.insert(task, TaskBundle { rubric, expert: Some(expert) });
        }
        Self {
            table: TranslationTable::from_json(TABLE).expect("bundled translation table is valid"),
            tasks,
            corpus: KnowledgeCorpus::from_json(CORPUS).expect("bundled corpus is valid"),
        }
    }

    /// Loads a catalog laid out like the bundled one:
    /// `translation_table.json`, `rubrics/*.json`, `experts/<task>.json`,
    /// and `knowledge/` (bundle file or directory).
    pub fn load(dir: &Path) -> Result<Self> {
        let table = TranslationTable::from_file(&dir.join("translation_table.json"))?;
        let mut tasks = BTreeMap::new();
        let mut rubric_files: Vec<_> = std::fs::read_dir(dir.join("rubrics"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        rubric_files.sort();
        for path in rubric_files {
            let rubric = TaskRubric::from_file(&path)?;
            let expert_path = dir.join("experts").join(format!("{}.json", rubric.task));
            let expert = if expert_path.exists() {
                Some(parse_expert(&std::fs::read_to_string(&expert_path)?, &rubric.task)?)
            } else {
                None
            };
            if tasks.insert(rubric.task.clone(), TaskBundle { rubric, expert }).is_some() {
                return Err(Error::Invalid(format!("two rubrics for one task in {}", dir.display())));
            }
        }
        let knowledge = dir.join("knowledge");
        let corpus = if knowledge.exists() {
            KnowledgeCorpus::load(&knowledge)?
        } else {
            KnowledgeCorpus::default()
        };
        Ok(Self { table, tasks, corpus })
    }

    pub fn task(&self, task: &TaskId) -> Option<&TaskBundle> {
        self.tasks.get(task)
    }

    pub fn rubric(&self, task: &TaskId) -> Result<&TaskRubric> {
        self.task(task).map(|b| &b.rubric).ok_or_else(|| Error::UnknownTask(task.clone()))
    }
}
