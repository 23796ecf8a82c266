//! Experiment harness: configuration, campaign orchestration, and artifacts.

pub mod campaign;
pub mod config;
pub mod parallel;
pub mod reduction;
pub mod scenario;

pub use campaign::{
    build_scenario, run_campaign, run_map, run_simulate, select_best, CampaignResult,
    HarnessError, Mode, RunReport, ThetaBestFile,
};
pub use config::{CellFile, ConfigError, ExperimentFile, ResolvedConfig};
pub use reduction::{build_reduction_map, charging_time, ReductionCell, ReductionMap};
pub use scenario::BatteryScenario;
