//! Structured additive models for click-through-rate prediction.

pub mod aggregate;
pub mod commands;
pub mod complexity;
pub mod data;
pub mod embedding;
pub mod equivalence;
pub mod error;
pub mod gradcheck;
pub mod interaction;
pub mod kind;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use kind::ModelKind;
pub use model::{Model, ModelConfig, ModelSpec};
