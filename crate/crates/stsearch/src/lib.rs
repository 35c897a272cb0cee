//! LLM-instructed neural architecture search for spatial-temporal sequence
//! forecasting.
//!
//! The engine searches a fixed DAG of spatial-temporal cells: a language
//! model (a remote OpenAI-compatible endpoint or a deterministic scripted
//! stand-in) proposes architectures, each candidate is quick-tuned on a
//! training split, scored on validation data, and stored in a sorted memory
//! bank that is rendered back into the next prompt. A two-stage schedule
//! splits the run into exploration and optimization rounds.
//!
//! Entry points:
//! - [`run::run_search`] drives the whole loop from a [`run::RunConfig`];
//! - [`arch`] holds the search space and model instantiation;
//! - [`policy`] holds prompt rendering, response parsing, and backends;
//! - [`tensor`] is the small autodiff kernel everything trains on.
//!
//! The `examples/` directory contains one runnable program per capability;
//! the `stsearch` binary wraps the same functions in a CLI.

pub mod arch;
pub mod bank;
pub mod data;
pub mod error;
pub mod ops;
pub mod policy;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
