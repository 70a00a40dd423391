//! HTTP session API and command-line entry points for the bandit engine.

pub mod api;
pub mod commands;
pub mod error;

pub use api::router;
pub use error::{codes, ApiError};
