//! Service layer for the copa engine: configuration, the on-disk event
//! store and the HTTP API. The `copa` binary wraps these in a CLI.

pub mod api;
pub mod config;
pub mod store;
