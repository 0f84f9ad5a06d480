//! Evidence, decision and feedback engine for scaffolding dyads through
//! computational modeling tasks.
//!
//! The guide in `book/` walks through the pieces; its code listings run as
//! doctests of this crate.

pub mod agents;
pub mod analytics;
pub mod audit;
pub mod backends;
pub mod catalog;
pub mod dialogue;
pub mod engine;
pub mod ingest;
mod error;
pub mod learner;
pub mod model;
pub mod replay;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/rules.md")]
    mod rules {}
    #[doc = include_str!("../../../book/src/audit.md")]
    mod audit {}
    #[doc = include_str!("../../../book/src/analytics.md")]
    mod analytics {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/reproducing.md")]
    mod reproducing {}
}
