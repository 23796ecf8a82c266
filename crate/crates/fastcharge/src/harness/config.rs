//! Experiment configuration: JSON schema, validation, and construction of the
//! core objects. One config file (plus the cell table it references) fully
//! determines a run; artifacts embed the SHA-256 of the resolved pair.

use crate::battery::{EcmParams, EcmTables, MismatchMode, MismatchSpec, ParamTable, VoltageSign};
use crate::bo::{BoConfig, BoundSide, ConstraintSpec, MonitoredQuantity};
use crate::mpc::{MpcConfig, SolverConfig};
use crate::rbf::RbfNetwork;
use crate::sampling::derive_seed;
use crate::{EcmParams64, MpcConfig64, RbfNetwork64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Cell parameter-table file. The shipped default is synthetic, desk-scale
/// data, not measurements of a real cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellFile {
    pub schema_version: u32,
    #[serde(default)]
    pub description: String,
    pub r0_ohm: KnotTable,
    pub r1_ohm: KnotTable,
    pub c1_f: KnotTable,
    pub ocv_v: KnotTable,
    pub eta: f64,
    pub q_c: f64,
    pub c_th_j_per_k: f64,
    pub r_th_k_per_w: f64,
    pub t_amb_k: f64,
    pub dt_s: f64,
    /// Reproduce the discharge-oriented output sign instead of the default
    /// charging-consistent one.
    #[serde(default)]
    pub paper_verbatim_sign: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotTable {
    pub soc: Vec<f64>,
    pub value: Vec<f64>,
}

impl From<&KnotTable> for ParamTable<f64> {
    fn from(t: &KnotTable) -> Self {
        ParamTable::new(t.soc.clone(), t.value.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchBlock {
    pub max_relative_perturbation: f64,
    /// Explicit perturbation seed; omitted means derived from the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub tol_kkt: f64,
    pub max_iters: usize,
    pub random_starts: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            max_iters: 200,
            random_starts: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcBlock {
    pub horizon_n: usize,
    pub i_min_a: f64,
    pub i_max_a: f64,
    pub gamma_t: f64,
    pub gamma_vt: f64,
    pub t_max_k: f64,
    pub vt_max_v: f64,
    pub vt_min_v: f64,
    pub slack_t_k: f64,
    pub slack_vt_v: f64,
    #[serde(default)]
    pub solver: SolverBlock,
}

/// RBF layout: either a regular grid or explicit centers and widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfBlock {
    pub vt_range_v: [f64; 2],
    pub t_range_k: [f64; 2],
    /// `[n_vt, n_t]` grid shape.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
    #[serde(default)]
    pub centers: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub widths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoBlock {
    pub beta: f64,
    pub tau: f64,
    pub acquisition_beta: f64,
    pub weight_bounds: [f64; 2],
    pub n_iterations: usize,
    pub n_initial_conditions: usize,
    #[serde(default = "default_candidate_samples")]
    pub candidate_samples: usize,
    #[serde(default = "default_refine_starts")]
    pub refine_starts: usize,
    #[serde(default = "default_refine_iters")]
    pub refine_iters: usize,
    #[serde(default = "default_hyperopt_starts")]
    pub hyperopt_starts: usize,
    #[serde(default = "default_hyperopt_iters")]
    pub hyperopt_iters: usize,
}

fn default_candidate_samples() -> usize {
    2048
}
fn default_refine_starts() -> usize {
    8
}
fn default_refine_iters() -> usize {
    40
}
fn default_hyperopt_starts() -> usize {
    3
}
fn default_hyperopt_iters() -> usize {
    80
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodesBlock {
    pub steps_m: usize,
    pub soc0_range: [f64; 2],
    pub t0_range_k: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        (0..self.steps)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcGridBlock {
    pub soc0: GridAxis,
    pub t0_k: GridAxis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub quantity: String,
    pub side: String,
    pub bound: f64,
}

impl ConstraintBlock {
    pub fn to_spec(&self) -> Result<ConstraintSpec<f64>, ConfigError> {
        let quantity = match self.quantity.as_str() {
            "soc" => MonitoredQuantity::Soc,
            "rc_voltage" => MonitoredQuantity::RcVoltage,
            "temperature" => MonitoredQuantity::Temperature,
            "terminal_voltage" => MonitoredQuantity::TerminalVoltage,
            other => {
                return Err(invalid(format!(
                    "constraints: unknown quantity {other:?} (expected soc, rc_voltage, temperature, terminal_voltage)"
                )))
            }
        };
        let side = match self.side.as_str() {
            "upper" => BoundSide::Upper,
            "lower" => BoundSide::Lower,
            other => {
                return Err(invalid(format!(
                    "constraints: unknown side {other:?} (expected upper or lower)"
                )))
            }
        };
        if !self.bound.is_finite() {
            return Err(invalid("constraints: bound must be finite"));
        }
        Ok(ConstraintSpec {
            quantity,
            side,
            bound: self.bound,
        })
    }

    /// Short column label, e.g. `vt_upper`.
    pub fn label(&self) -> String {
        let q = match self.quantity.as_str() {
            "terminal_voltage" => "vt",
            "temperature" => "t",
            "rc_voltage" => "u1",
            other => other,
        };
        format!("{q}_{}", self.side)
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: String,
    /// Path to the cell table, relative to this config file.
    pub battery_table: String,
    pub mismatch: MismatchBlock,
    pub mpc: MpcBlock,
    pub rbf: RbfBlock,
    pub bo: BoBlock,
    pub episodes: EpisodesBlock,
    pub charging_target_soc: f64,
    pub ic_grid: IcGridBlock,
    pub constraints: Vec<ConstraintBlock>,
}

/// Experiment file with the referenced cell table inlined; this is the unit
/// that gets hashed and embedded in the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub experiment: ExperimentFile,
    pub cell: CellFile,
}

impl ResolvedConfig {
    pub fn load(config_path: &Path) -> Result<Self, ConfigError> {
        let experiment: ExperimentFile = read_json(config_path)?;
        let table_path = config_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&experiment.battery_table);
        let cell: CellFile = read_json(&table_path)?;
        let resolved = Self { experiment, cell };
        resolved.validate()?;
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if e.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                e.schema_version
            )));
        }
        if self.cell.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(invalid(format!(
                "cell schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.cell.schema_version
            )));
        }
        // Cell table must build.
        let plant = self.plant_params().map_err(|err| invalid(err.to_string()))?;
        let _ = plant;
        self.mismatch_spec(0).validate().map_err(|err| invalid(err.to_string()))?;

        if e.mpc.horizon_n < 1 {
            return Err(invalid("mpc.horizon_n must be at least 1"));
        }
        if !(e.mpc.i_min_a <= e.mpc.i_max_a) {
            return Err(invalid("mpc.i_min_a must not exceed mpc.i_max_a"));
        }
        for (name, v) in [
            ("mpc.gamma_t", e.mpc.gamma_t),
            ("mpc.gamma_vt", e.mpc.gamma_vt),
            ("mpc.slack_t_k", e.mpc.slack_t_k),
            ("mpc.slack_vt_v", e.mpc.slack_vt_v),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        if !(e.mpc.solver.tol_kkt > 0.0) {
            return Err(invalid("mpc.solver.tol_kkt must be positive"));
        }

        let net = self.rbf_network().map_err(|err| invalid(err.to_string()))?;
        if net.count() == 0 {
            return Err(invalid("rbf: network must have at least one center"));
        }

        let [w_lo, w_hi] = e.bo.weight_bounds;
        if !(w_lo < w_hi) {
            return Err(invalid("bo.weight_bounds must satisfy lo < hi"));
        }
        if e.bo.n_iterations < 1 || e.bo.n_initial_conditions < 1 {
            return Err(invalid(
                "bo.n_iterations and bo.n_initial_conditions must be at least 1",
            ));
        }
        if !(e.bo.beta >= 0.0) || !(e.bo.tau > 0.0) {
            return Err(invalid("bo.beta must be >= 0 and bo.tau > 0"));
        }

        if e.episodes.steps_m < 1 {
            return Err(invalid("episodes.steps_m must be at least 1"));
        }
        for (name, [lo, hi]) in [
            ("episodes.soc0_range", e.episodes.soc0_range),
            ("episodes.t0_range_k", e.episodes.t0_range_k),
        ] {
            if !(lo <= hi) {
                return Err(invalid(format!("{name} must be ordered")));
            }
        }
        if !(e.episodes.soc0_range[0] >= 0.0 && e.episodes.soc0_range[1] <= 1.0) {
            return Err(invalid("episodes.soc0_range must lie in [0, 1]"));
        }
        if !(e.charging_target_soc > 0.0 && e.charging_target_soc <= 1.0) {
            return Err(invalid("charging_target_soc must lie in (0, 1]"));
        }
        if e.ic_grid.soc0.steps == 0 || e.ic_grid.t0_k.steps == 0 {
            return Err(invalid("ic_grid axes need at least one step"));
        }
        for axis in [&e.ic_grid.soc0, &e.ic_grid.t0_k] {
            if !(axis.min <= axis.max) {
                return Err(invalid("ic_grid axis must be ordered"));
            }
        }
        if e.constraints.is_empty() {
            return Err(invalid("constraints: need at least one monitored bound"));
        }
        for c in &e.constraints {
            c.to_spec()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization of the resolved pair.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    pub fn cell_tables(&self) -> EcmTables<f64> {
        EcmTables {
            r0: (&self.cell.r0_ohm).into(),
            r1: (&self.cell.r1_ohm).into(),
            c1: (&self.cell.c1_f).into(),
            ocv: (&self.cell.ocv_v).into(),
            eta: self.cell.eta,
            q: self.cell.q_c,
            c_th: self.cell.c_th_j_per_k,
            r_th: self.cell.r_th_k_per_w,
            t_amb: self.cell.t_amb_k,
            dt: self.cell.dt_s,
            sign: if self.cell.paper_verbatim_sign {
                VoltageSign::PaperVerbatim
            } else {
                VoltageSign::ChargingConsistent
            },
        }
    }

    pub fn plant_params(&self) -> Result<EcmParams64, crate::battery::BatteryError> {
        EcmParams::new(self.cell_tables())
    }

    /// Mismatch spec with the seed resolved against the given campaign seed.
    pub fn mismatch_spec(&self, campaign_seed: u64) -> MismatchSpec {
        MismatchSpec {
            max_relative_perturbation: self.experiment.mismatch.max_relative_perturbation,
            seed: self
                .experiment
                .mismatch
                .seed
                .unwrap_or_else(|| derive_seed(campaign_seed, 0x15A7C4, 0)),
            mode: MismatchMode::MultiplicativeUniform,
        }
    }

    pub fn rbf_network(&self) -> Result<RbfNetwork64, crate::rbf::RbfError> {
        let r = &self.experiment.rbf;
        let vt = (r.vt_range_v[0], r.vt_range_v[1]);
        let t = (r.t_range_k[0], r.t_range_k[1]);
        match (&r.grid, &r.centers, &r.widths) {
            (Some([nv, nt]), None, None) => RbfNetwork::grid(*nv, *nt, vt, t),
            (None, Some(centers), Some(widths)) => RbfNetwork::new(
                centers.iter().map(|c| (c[0], c[1])).collect(),
                widths.clone(),
                vt,
                t,
            ),
            _ => Err(crate::rbf::RbfError::LengthMismatch {
                centers: r.centers.as_ref().map_or(0, Vec::len),
                widths: r.widths.as_ref().map_or(0, Vec::len),
            }),
        }
    }

    /// MPC configuration around the given (usually mismatched) prediction
    /// model.
    pub fn mpc_config(&self, prediction_params: EcmParams64, solver_seed: u64) -> MpcConfig64 {
        let m = &self.experiment.mpc;
        MpcConfig {
            horizon_n: m.horizon_n,
            i_min: m.i_min_a,
            i_max: m.i_max_a,
            gamma_t: m.gamma_t,
            gamma_vt: m.gamma_vt,
            t_max: m.t_max_k,
            vt_max: m.vt_max_v,
            vt_min: m.vt_min_v,
            slack_t: m.slack_t_k,
            slack_vt: m.slack_vt_v,
            prediction_params,
            solver: SolverConfig {
                tol_kkt: m.solver.tol_kkt,
                max_iters: m.solver.max_iters,
                random_starts: m.solver.random_starts,
                seed: solver_seed,
            },
        }
    }

    pub fn bo_config(&self, constrained: bool, campaign_seed: u64, dim: usize) -> BoConfig<f64> {
        let b = &self.experiment.bo;
        BoConfig {
            beta: b.beta,
            tau: b.tau,
            acquisition_beta: b.acquisition_beta,
            weight_lo: b.weight_bounds[0],
            weight_hi: b.weight_bounds[1],
            dim,
            n_iterations: b.n_iterations,
            n_initial_conditions: b.n_initial_conditions,
            constrained,
            seed: campaign_seed,
            candidate_samples: b.candidate_samples,
            refine_starts: b.refine_starts,
            refine_iters: b.refine_iters,
            hyperopt_starts: b.hyperopt_starts,
            hyperopt_iters: b.hyperopt_iters,
        }
    }

    pub fn constraint_specs(&self) -> Vec<ConstraintSpec<f64>> {
        self.experiment
            .constraints
            .iter()
            .map(|c| c.to_spec().expect("validated at load"))
            .collect()
    }

    pub fn constraint_labels(&self) -> Vec<String> {
        self.experiment
            .constraints
            .iter()
            .map(ConstraintBlock::label)
            .collect()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Shared by harness unit tests: the shipped default pair, parsed in-memory.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn resolved_default() -> ResolvedConfig {
        let experiment: ExperimentFile =
            serde_json::from_str(include_str!("../../configs/default.json")).unwrap();
        let cell: CellFile =
            serde_json::from_str(include_str!("../../configs/default_cell.json")).unwrap();
        let resolved = ResolvedConfig { experiment, cell };
        resolved.validate().unwrap();
        resolved
    }
}
