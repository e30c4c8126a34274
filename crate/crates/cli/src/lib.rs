//! Scenario runner behind the `sharebft` binary.

pub mod report;
pub mod runner;
pub mod scenario;

pub use report::{collect, ModeStats, Report};
pub use runner::{run_scenario, RunOptions, RunReport, SCHEMA_VERSION};
pub use scenario::{ConsensusSpec, Expectation, ScenarioFile, SchemaError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SHAREBFT_OUT_DIR";
