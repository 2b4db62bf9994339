//! Training, evaluation, checkpointing and command-line tooling for the
//! Attamba models in [`attamba_core`].
//!
//! Text is tokenized as raw bytes (vocabulary 256). Everything here is
//! deterministic given a seed.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod presets;
pub mod tools;
pub mod train;

pub use error::{HarnessError, Result};
