//! Campaign orchestration and artifact writing.
//!
//! A campaign runs the tuning loop in safe and/or unconstrained mode against
//! the same plant, mismatch draw, and initial-condition streams, then writes
//! every artifact (history, summary CSV, selected weights, episode
//! trajectories, run report) under one output directory. Every artifact
//! embeds the resolved-config hash and the seed.

use super::config::ResolvedConfig;
use super::reduction::{build_reduction_map, ReductionMap};
use super::scenario::BatteryScenario;
use crate::battery::{perturb_params, BatteryError, BatteryState, Trajectory};
use crate::bo::{run_loop, BoError, BoHistory, IterationRecord};
use crate::gp::KernelConfig;
use crate::mpc::MpcController;
use crate::rbf::ThetaVec;
use crate::sampling::derive_seed;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Safe,
    Unconstrained,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Safe => "safe",
            Mode::Unconstrained => "unconstrained",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Selected weights artifact (`theta_best.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaBestFile {
    pub config_sha256: String,
    pub seed: u64,
    pub mode: Mode,
    /// `best_feasible` (safe mode) or `best_overall` (unconstrained).
    pub selection: String,
    pub iteration: usize,
    pub g0: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub status: String,
    pub iterations: usize,
    pub violations: usize,
    pub failed_episodes: usize,
    pub best_iteration: Option<usize>,
    pub best_g0: Option<f64>,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub modes: Vec<ModeSummary>,
    pub failures: Vec<String>,
}

pub struct CampaignResult {
    pub report: RunReport,
    pub histories: Vec<(Mode, BoHistory<f64>)>,
    pub report_path: PathBuf,
}

/// Build the scenario shared by tune/map/simulate: true plant from the cell
/// table, prediction model perturbed by the campaign-seeded mismatch.
pub fn build_scenario(
    resolved: &ResolvedConfig,
    seed: u64,
    jobs: usize,
) -> Result<BatteryScenario, HarnessError> {
    let plant = resolved.plant_params()?;
    let mismatch = resolved.mismatch_spec(seed);
    let prediction = perturb_params(&plant, &mismatch)?;
    let mpc_cfg = resolved.mpc_config(prediction, derive_seed(seed, 0x501E, 0));
    let net = resolved
        .rbf_network()
        .map_err(|e| HarnessError::Other(e.to_string()))?;
    let e = &resolved.experiment.episodes;
    Ok(BatteryScenario::new(
        plant,
        mpc_cfg,
        net,
        resolved.constraint_specs(),
        e.steps_m,
        (e.soc0_range[0], e.soc0_range[1]),
        (e.t0_range_k[0], e.t0_range_k[1]),
        seed,
        jobs,
    ))
}

/// Run the requested modes and write all artifacts under `out_dir`.
pub fn run_campaign(
    resolved: &ResolvedConfig,
    modes: &[Mode],
    out_dir: &Path,
    jobs: usize,
) -> Result<CampaignResult, HarnessError> {
    let seed = resolved.seed();
    let hash = resolved.hash();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let resolved_path = out_dir.join("resolved_config.json");
    write_json(&resolved_path, resolved)?;

    let mut summaries = Vec::new();
    let mut histories = Vec::new();
    let mut failures = Vec::new();

    for &mode in modes {
        let started = Instant::now();
        let scenario = build_scenario(resolved, seed, jobs)?;
        let net_count = scenario.network().count();
        let bo_cfg = resolved.bo_config(mode == Mode::Safe, seed, net_count);
        let mode_dir = out_dir.join(mode.as_str());
        fs::create_dir_all(&mode_dir).map_err(io_err(&mode_dir))?;

        match run_loop(&bo_cfg, &scenario) {
            Ok(history) => {
                let artifacts =
                    write_mode_artifacts(resolved, &hash, mode, &mode_dir, &history, &scenario)?;
                let best = select_best(mode, &history);
                summaries.push(ModeSummary {
                    mode,
                    status: if best.is_some() {
                        "ok".into()
                    } else {
                        "no_safe_iteration".into()
                    },
                    iterations: history.records.len(),
                    violations: history.violation_count(),
                    failed_episodes: history.records.iter().map(|r| r.failed_episodes).sum(),
                    best_iteration: best.map(|r| r.iteration),
                    best_g0: best.map(|r| r.g0),
                    wall_time_s: started.elapsed().as_secs_f64(),
                    artifacts,
                });
                histories.push((mode, history));
            }
            Err(err) => {
                failures.push(format!("{mode}: {err}"));
                summaries.push(ModeSummary {
                    mode,
                    status: format!("failed: {err}"),
                    iterations: 0,
                    violations: 0,
                    failed_episodes: 0,
                    best_iteration: None,
                    best_g0: None,
                    wall_time_s: started.elapsed().as_secs_f64(),
                    artifacts: Vec::new(),
                });
            }
        }
    }

    let report = RunReport {
        schema_version: 1,
        config_sha256: hash,
        seed,
        modes: summaries,
        failures,
    };
    let report_path = out_dir.join("run_report.json");
    write_json(&report_path, &report)?;
    Ok(CampaignResult {
        report,
        histories,
        report_path,
    })
}

/// Selection rule: safe mode picks the best violation-free iteration,
/// unconstrained the best overall.
pub fn select_best(mode: Mode, history: &BoHistory<f64>) -> Option<&IterationRecord<f64>> {
    match mode {
        Mode::Safe => history.best_safe_record(),
        Mode::Unconstrained => history.best_overall(),
    }
}

fn write_mode_artifacts(
    resolved: &ResolvedConfig,
    hash: &str,
    mode: Mode,
    mode_dir: &Path,
    history: &BoHistory<f64>,
    scenario: &BatteryScenario,
) -> Result<Vec<String>, HarnessError> {
    let mut artifacts = Vec::new();
    let labels = resolved.constraint_labels();
    let seed = resolved.seed();

    let timings = scenario.take_timings();
    let wall_of = |iteration: usize| -> f64 {
        timings
            .iter()
            .find(|(i, _)| *i == iteration)
            .map_or(0.0, |(_, s)| *s)
    };

    // history.jsonl: one header record, then one record per iteration.
    let history_path = mode_dir.join("history.jsonl");
    {
        let file = fs::File::create(&history_path).map_err(io_err(&history_path))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({
            "type": "header",
            "schema_version": 1,
            "config_sha256": hash,
            "seed": seed,
            "mode": mode.as_str(),
            "constraints": labels,
        });
        writeln!(w, "{header}").map_err(io_err(&history_path))?;
        for record in &history.records {
            let dto = iteration_dto(record, wall_of(record.iteration));
            writeln!(w, "{dto}").map_err(io_err(&history_path))?;
        }
    }
    artifacts.push(rel(mode_dir, &history_path));

    // history_summary.csv.
    let summary_path = mode_dir.join("history_summary.csv");
    {
        let file = fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# config_sha256={hash} seed={seed} mode={mode}")
            .map_err(io_err(&summary_path))?;
        let slack_cols: Vec<String> = labels.iter().map(|l| format!("slack_{l}")).collect();
        writeln!(w, "iteration,g0,{},violated", slack_cols.join(","))
            .map_err(io_err(&summary_path))?;
        for r in &history.records {
            let slacks: Vec<String> = r.slacks.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                r.g0,
                slacks.join(","),
                u8::from(r.violated)
            )
            .map_err(io_err(&summary_path))?;
        }
    }
    artifacts.push(rel(mode_dir, &summary_path));

    // theta_best.json (absent when safe mode saw no violation-free iteration).
    if let Some(best) = select_best(mode, history) {
        let theta_path = mode_dir.join("theta_best.json");
        write_json(
            &theta_path,
            &ThetaBestFile {
                config_sha256: hash.to_string(),
                seed,
                mode,
                selection: match mode {
                    Mode::Safe => "best_feasible".into(),
                    Mode::Unconstrained => "best_overall".into(),
                },
                iteration: best.iteration,
                g0: best.g0,
                theta: best.theta.weights().to_vec(),
            },
        )?;
        artifacts.push(rel(mode_dir, &theta_path));
    }

    // Per-episode trajectories.
    let traj_dir = mode_dir.join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(io_err(&traj_dir))?;
    for captured in scenario.take_captured() {
        let name = format!("iter{:03}_ep{}.csv", captured.iteration, captured.episode);
        let path = traj_dir.join(&name);
        write_trajectory_csv(&path, &captured.outcome.trajectory, hash, seed)?;
    }
    artifacts.push(format!("{}/", rel(mode_dir, &traj_dir)));

    Ok(artifacts)
}

fn iteration_dto(record: &IterationRecord<f64>, wall_time_s: f64) -> serde_json::Value {
    let kernels: Vec<serde_json::Value> = record
        .kernels
        .iter()
        .map(|k: &KernelConfig<f64>| {
            serde_json::json!({
                "signal_variance": k.signal_variance,
                "lengthscales": k.lengthscales,
                "noise_variance": k.noise_variance,
                "mean": k.mean,
            })
        })
        .collect();
    let episodes: Vec<serde_json::Value> = record
        .episodes
        .iter()
        .map(|e| {
            serde_json::json!({
                "z0": e.z0,
                "t0_k": e.t0,
                "failed": e.failed,
                "tracking_cost": e.tracking_cost,
            })
        })
        .collect();
    serde_json::json!({
        "type": "iteration",
        "iteration": record.iteration,
        "theta": record.theta.weights(),
        "g0": record.g0,
        "slacks": record.slacks,
        "violated": record.violated,
        "failed_episodes": record.failed_episodes,
        "stalled": record.stalled,
        "episodes": episodes,
        "kernels": kernels,
        "wall_time_s": wall_time_s,
    })
}

/// Trajectory CSV: `k,time_s,z,u1_V,T_K,I_A,VT_V` with an audit comment line.
pub fn write_trajectory_csv(
    path: &Path,
    trajectory: &Trajectory<f64>,
    hash: &str,
    seed: u64,
) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config_sha256={hash} seed={seed}").map_err(io_err(path))?;
    writeln!(w, "k,time_s,z,u1_V,T_K,I_A,VT_V").map_err(io_err(path))?;
    for (k, step) in trajectory.steps.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            k,
            k as f64 * trajectory.dt,
            step.state.z,
            step.state.u1,
            step.state.t,
            step.current,
            step.terminal_voltage
        )
        .map_err(io_err(path))?;
    }
    if let Some(failed_at) = trajectory.failed_at {
        writeln!(w, "# failed_at={failed_at}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Run one episode with the given weights and write its trajectory (and
/// optional per-solve diagnostics) under `out_dir`.
pub fn run_simulate(
    resolved: &ResolvedConfig,
    theta: &ThetaVec<f64>,
    soc0: f64,
    t0: f64,
    out_dir: &Path,
    diagnostics: bool,
    jobs: usize,
) -> Result<PathBuf, HarnessError> {
    let scenario = build_scenario(resolved, resolved.seed(), jobs)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let hash = resolved.hash();

    let x0 = BatteryState::new(soc0, 0.0, t0);
    let (trajectory, diag) = if diagnostics {
        // A recording controller with the same mismatched prediction model
        // the scenario episodes use.
        let prediction = {
            let plant = resolved.plant_params()?;
            perturb_params(&plant, &resolved.mismatch_spec(resolved.seed()))?
        };
        let mut controller = MpcController::new(
            resolved.mpc_config(prediction, derive_seed(resolved.seed(), 0x501E, 0)),
            scenario.network().clone(),
            theta.clone(),
        )
        .map_err(|e| HarnessError::Other(e.to_string()))?;
        controller.record_diagnostics();
        let trajectory = crate::battery::simulate_episode(
            &mut controller,
            x0,
            scenario.steps_m(),
            scenario.plant(),
        );
        let diag = controller.diagnostics().map(<[_]>::to_vec);
        (trajectory, diag)
    } else {
        (scenario.run_episode(theta, x0).trajectory, None)
    };

    let traj_path = out_dir.join("trajectory.csv");
    write_trajectory_csv(&traj_path, &trajectory, &hash, resolved.seed())?;

    if let Some(diag) = diag {
        let diag_path = out_dir.join("mpc_diag.jsonl");
        let file = fs::File::create(&diag_path).map_err(io_err(&diag_path))?;
        let mut w = BufWriter::new(file);
        for d in diag {
            let line = serde_json::json!({
                "iterations": d.iterations,
                "grad_pnorm": d.grad_pnorm,
                "cost": d.cost,
                "converged": d.converged,
            });
            writeln!(w, "{line}").map_err(io_err(&diag_path))?;
        }
    }
    Ok(traj_path)
}

/// Build the reduction map over the configured grid and write it as CSV.
pub fn run_map(
    resolved: &ResolvedConfig,
    theta: &ThetaVec<f64>,
    out_dir: &Path,
    jobs: usize,
) -> Result<(PathBuf, ReductionMap), HarnessError> {
    let scenario = build_scenario(resolved, resolved.seed(), jobs)?.without_capture();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let grid: Vec<(f64, f64)> = resolved
        .experiment
        .ic_grid
        .soc0
        .values()
        .into_iter()
        .flat_map(|z| {
            resolved
                .experiment
                .ic_grid
                .t0_k
                .values()
                .into_iter()
                .map(move |t| (z, t))
        })
        .collect();
    let map = build_reduction_map(
        &scenario,
        &grid,
        theta,
        resolved.experiment.charging_target_soc,
        jobs,
    );

    let path = out_dir.join("reduction_map.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "# config_sha256={} seed={}",
        resolved.hash(),
        resolved.seed()
    )
    .map_err(io_err(&path))?;
    writeln!(w, "soc0,t0_K,t_base_s,t_learned_s,reduction_s,status").map_err(io_err(&path))?;
    for cell in &map.cells {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{}",
            cell.soc0,
            cell.t0,
            fmt_opt(cell.baseline_s),
            fmt_opt(cell.learned_s),
            fmt_opt(cell.reduction_s()),
            cell.status()
        )
        .map_err(io_err(&path))?;
    }
    drop(w);
    Ok((path, map))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Other(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base.parent().unwrap_or(base))
        .unwrap_or(path)
        .display()
        .to_string()
}
