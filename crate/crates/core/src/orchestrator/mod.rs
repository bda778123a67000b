//! Periodic reconfiguration cycle and its supporting pieces.

mod catalog;
mod config;
mod cycle;
mod generator;
mod scenario;

pub use catalog::{pattern_key, Catalog, CatalogPattern, ProposalRecord, SearchDocument, TestCase};
pub use config::{ApprovalMode, BackendConfig, InitialPattern, OrchestratorConfig, Paths};
pub use cycle::{run_cycle, CycleContext, CycleError, CycleReport, CycleStatus, Step};
pub use generator::{generate_synthetic_log, split_counts, AppTraffic, SizeMix, TrafficParams};
pub use scenario::{
    compare, quantity, replay_scenario, Diff, Expectation, Expected, ReplayOutcome,
    ReplayOverrides, Scenario,
};
