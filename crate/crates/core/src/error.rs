use thiserror::Error;

use crate::backends::BackendError;
use crate::model::{DyadId, TaskId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown dyad {0}")]
    UnknownDyad(DyadId),

    #[error("stale write for dyad {dyad}: base version {base}, current {current}")]
    StaleWrite { dyad: DyadId, base: u64, current: u64 },

    #[error("rubric is for task {rubric}, model is for task {model}")]
    RubricTaskMismatch { rubric: TaskId, model: TaskId },

    #[error("mastery scores belong to different tasks ({0} vs {1})")]
    TaskMismatch(TaskId, TaskId),

    #[error("no expert reference for task {0}")]
    NoExpertReference(TaskId),

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("session {0} is closed")]
    SessionClosed(String),

    #[error("dyad {dyad} already has open session {session}")]
    SessionAlreadyOpen { dyad: DyadId, session: String },

    #[error("incomplete traces: {0:?}")]
    IncompleteTrace(Vec<String>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("persistence failed: {0}")]
    Persistence(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
