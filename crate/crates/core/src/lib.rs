//! Load-driven FPGA offload search and in-operation reconfiguration.
//!
//! The pipeline analyzes production request history, finds the apps with the
//! highest corrected processing load, searches offload patterns for them in a
//! verification backend, weighs the candidates against the pattern currently
//! loaded, and (after approval) swaps the FPGA logic with a short stop/start.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod backend;
pub mod decision;
pub mod error;
pub mod executor;
pub mod loop_analysis;
pub mod orchestrator;
pub mod pattern_search;

pub use error::{Error, Result};
