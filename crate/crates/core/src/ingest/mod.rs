//! Raw activity logs to processed actions, canonical models and mastery.

pub mod canonical;
pub mod rubric;
pub mod translate;
pub mod workspace;

pub use canonical::{canonicalize, normalize_expression, to_model_state};
pub use rubric::{score_task, Predicate, RubricCriterion, TaskRubric};
pub use translate::{TranslationEntry, TranslationTable};
pub use workspace::{classify_delta, ingest_log, mastery_at, parse_jsonl, IngestedLog, SessionIngestor, Workspace};
