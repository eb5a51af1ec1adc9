//! Scenario files, the virtual-clock runner and its reports.

pub mod config;
pub mod report;
pub mod sim;

pub use config::{parse_scenario, ConfigError, ScenarioConfig};
pub use report::MetricsReport;
pub use sim::{run_scenario, SimError, SimOutcome};
