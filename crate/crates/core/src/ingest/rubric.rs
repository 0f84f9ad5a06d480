use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::canonical::{normalize_block, normalize_expression, rhs};
use crate::model::{CanonicalModel, MasteryScore, TaskId, Timestamp};
use crate::{Error, Result};

pub const RUBRIC_SCHEMA_VERSION: u32 = 1;

/// Declarative match over one canonical component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    /// Normalized expression equality; `value` is normalized on load.
    Equals { component: String, value: String },
    /// Normalized expression contains the normalized fragment.
    Contains { component: String, text: String },
    /// The component's right-hand side is a number within `rel_tol` of `value`.
    Numeric {
        component: String,
        value: f64,
        #[serde(default)]
        rel_tol: f64,
    },
    Present { component: String },
}

impl Predicate {
    pub fn component(&self) -> &str {
        match self {
            Predicate::Equals { component, .. }
            | Predicate::Contains { component, .. }
            | Predicate::Numeric { component, .. }
            | Predicate::Present { component } => component,
        }
    }

    pub fn matches(&self, model: &CanonicalModel) -> bool {
        let Some(expr) = model.get(self.component()) else { return false };
        match self {
            Predicate::Equals { value, .. } => normalize_block(value).1 == expr,
            Predicate::Contains { text, .. } => expr.contains(&normalize_expression(text)),
            Predicate::Numeric { value, rel_tol, .. } => match rhs(expr).parse::<f64>() {
                Ok(x) if *rel_tol == 0.0 => x == *value,
                Ok(x) => (x - value).abs() <= rel_tol * value.abs(),
                Err(_) => false,
            },
            Predicate::Present { .. } => true,
        }
    }

    /// The expression a fully correct student would have written, when the
    /// predicate pins one down.
    pub fn answer(&self) -> Option<String> {
        match self {
            Predicate::Equals { value, .. } => Some(normalize_block(value).1),
            Predicate::Numeric { component, value, .. } => {
                let var = component.strip_suffix("-init").or_else(|| component.strip_suffix("-update"))?;
                Some(format!("{var} = {}", normalize_expression(&value.to_string())))
            }
            Predicate::Contains { text, .. } => Some(normalize_expression(text)),
            Predicate::Present { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricCriterion {
    pub id: String,
    pub description: String,
    pub predicate: Predicate,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRubric {
    pub schema_version: u32,
    pub task: TaskId,
    #[serde(default)]
    pub title: String,
    /// Criteria in task-progress order; earlier criteria are earlier steps.
    pub criteria: Vec<RubricCriterion>,
}

/// Mastery values are rounded to this grid so sums of weights compare exactly.
const GRID: f64 = 1e12;

fn round_grid(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

impl TaskRubric {
    pub fn from_json(text: &str) -> Result<Self> {
        let r: TaskRubric = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUBRIC_SCHEMA_VERSION {
            return Err(Error::Invalid(format!("unsupported rubric schema_version {}", self.schema_version)));
        }
        if self.criteria.is_empty() {
            return Err(Error::Invalid(format!("rubric {} has no criteria", self.task)));
        }
        let mut ids = BTreeSet::new();
        for c in &self.criteria {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Invalid(format!("rubric {} repeats criterion id {}", self.task, c.id)));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Invalid(format!("criterion {} has non-positive weight", c.id)));
            }
        }
        let total: f64 = self.criteria.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("rubric {} weights sum to {total}, not 1", self.task)));
        }
        Ok(())
    }

    /// Rubric components in criterion order, without repeats.
    pub fn component_order(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.criteria.iter().map(|c| c.predicate.component()).filter(|k| seen.insert(*k)).collect()
    }

    /// Every answer expression, as used by the probing guardrail: each
    /// `var = rhs` form, plus the bare right-hand side when it is a compound
    /// expression rather than a single constant or name. Both the normalized
    /// and the authored spelling are listed.
    pub fn answer_expressions(&self) -> Vec<String> {
        let mut forms = BTreeSet::new();
        for c in &self.criteria {
            if let Some(a) = c.predicate.answer() {
                forms.insert(a);
            }
            if let Predicate::Equals { value, .. } = &c.predicate {
                forms.insert(value.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase());
            }
        }
        let mut out = BTreeSet::new();
        // A lone name or constant (e.g. a `contains` predicate on "y") is not
        // an answer; banning it would ban the word itself.
        let pins_value = |s: &str| s.contains(['=', '+', '-', '*', '/', '<', '>']) && s.parse::<f64>().is_err();
        for a in forms.into_iter().filter(|a| pins_value(a)) {
            let r = rhs(&a).to_string();
            if r != a && r.contains(['+', '-', '*', '/']) && r.parse::<f64>().is_err() {
                out.insert(r);
            }
            out.insert(a);
        }
        out.into_iter().collect()
    }
}

/// Weighted share of criteria the model satisfies.
pub fn score_task(model: &CanonicalModel, model_task: &TaskId, rubric: &TaskRubric, at: Timestamp) -> Result<MasteryScore> {
    if &rubric.task != model_task {
        return Err(Error::RubricTaskMismatch { rubric: rubric.task.clone(), model: model_task.clone() });
    }
    let mut criteria_met = BTreeSet::new();
    let mut value = 0.0;
    for c in &rubric.criteria {
        if c.predicate.matches(model) {
            criteria_met.insert(c.id.clone());
            value += c.weight;
        }
    }
    Ok(MasteryScore { task: rubric.task.clone(), value: round_grid(value).clamp(0.0, 1.0), criteria_met, at })
}
