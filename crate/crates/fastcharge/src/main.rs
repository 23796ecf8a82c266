//! Command-line front end: simulate single episodes, tune the stage-cost
//! weights, build reduction maps, and validate configurations.

use clap::{Parser, Subcommand};
use fastcharge::harness::{
    run_campaign, run_map, run_simulate, ConfigError, HarnessError, Mode, ResolvedConfig,
};
use fastcharge::rbf::ThetaVec;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fastcharge",
    about = "Closed-loop tuning of a battery fast-charging MPC",
    version
)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Episode-level parallelism cap.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop charging episode and write its trajectory CSV.
    Simulate {
        /// Weight file: either a theta_best.json or a bare JSON array.
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Initial state of charge (defaults to the configured range minimum).
        #[arg(long)]
        soc0: Option<f64>,
        /// Initial temperature in kelvin (defaults to the range minimum).
        #[arg(long)]
        t0: Option<f64>,
        /// Also write per-solve solver diagnostics (JSON lines).
        #[arg(long)]
        diagnostics: bool,
    },
    /// Run the tuning campaign and write history, summary, and trajectories.
    Tune {
        /// Which loop(s) to run.
        #[arg(long, value_parser = parse_mode, default_value = "safe")]
        mode: Vec<ModeArg>,
    },
    /// Build the charging-time reduction map for learned weights.
    Map {
        /// Weight file: either a theta_best.json or a bare JSON array.
        #[arg(long)]
        theta: PathBuf,
    },
    /// Check that a configuration file (and its cell table) is usable.
    ValidateConfig,
}

#[derive(Clone, Copy, Debug)]
enum ModeArg {
    Safe,
    Unconstrained,
    Both,
}

fn parse_mode(s: &str) -> Result<ModeArg, String> {
    match s {
        "safe" => Ok(ModeArg::Safe),
        "unconstrained" => Ok(ModeArg::Unconstrained),
        "both" => Ok(ModeArg::Both),
        other => Err(format!(
            "unknown mode {other:?} (expected safe, unconstrained, or both)"
        )),
    }
}

fn modes_from_args(args: &[ModeArg]) -> Vec<Mode> {
    let mut modes = Vec::new();
    for arg in args {
        match arg {
            ModeArg::Safe => push_unique(&mut modes, Mode::Safe),
            ModeArg::Unconstrained => push_unique(&mut modes, Mode::Unconstrained),
            ModeArg::Both => {
                push_unique(&mut modes, Mode::Safe);
                push_unique(&mut modes, Mode::Unconstrained);
            }
        }
    }
    modes
}

fn push_unique(modes: &mut Vec<Mode>, mode: Mode) {
    if !modes.contains(&mode) {
        modes.push(mode);
    }
}

/// Accepts a theta_best.json or a bare JSON array of weights.
fn load_theta(path: &Path, expected_len: usize) -> Result<ThetaVec<f64>, String> {
    #[derive(Deserialize)]
    struct WithTheta {
        theta: Vec<f64>,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let weights = serde_json::from_str::<Vec<f64>>(&text)
        .or_else(|_| serde_json::from_str::<WithTheta>(&text).map(|w| w.theta))
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if weights.len() != expected_len {
        return Err(format!(
            "{}: {} weights, but the configured network has {expected_len} centers",
            path.display(),
            weights.len()
        ));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(format!("{}: weights must be finite", path.display()));
    }
    Ok(ThetaVec::new(weights))
}

/// Exit codes: 2 for configuration/usage problems, 1 for runtime failures.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let mut resolved = match ResolvedConfig::load(&cli.config) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("config error: {err}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        resolved.experiment.seed = seed;
    }
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&resolved.experiment.output_dir));

    match run(cli, resolved, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn run(cli: Cli, resolved: ResolvedConfig, out_dir: &Path) -> Result<(), CliError> {
    let net_count = resolved
        .rbf_network()
        .map_err(|e| CliError::Config(e.to_string()))?
        .count();
    match cli.command {
        Command::ValidateConfig => {
            resolved.validate()?;
            println!(
                "ok: {} (config_sha256={})",
                cli.config.display(),
                resolved.hash()
            );
            Ok(())
        }
        Command::Simulate {
            theta,
            soc0,
            t0,
            diagnostics,
        } => {
            let theta = match theta {
                Some(path) => load_theta(&path, net_count).map_err(CliError::Config)?,
                None => ThetaVec::zeros(net_count),
            };
            let soc0 = soc0.unwrap_or(resolved.experiment.episodes.soc0_range[0]);
            let t0 = t0.unwrap_or(resolved.experiment.episodes.t0_range_k[0]);
            if !(0.0..=1.0).contains(&soc0) {
                return Err(CliError::Config(format!("soc0 {soc0} outside [0, 1]")));
            }
            let path = run_simulate(&resolved, &theta, soc0, t0, out_dir, diagnostics, cli.jobs)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Tune { mode } => {
            let modes = modes_from_args(&mode);
            let result = run_campaign(&resolved, &modes, out_dir, cli.jobs)?;
            for summary in &result.report.modes {
                println!(
                    "{}: {} ({} iterations, {} violating)",
                    summary.mode, summary.status, summary.iterations, summary.violations
                );
            }
            println!("report: {}", result.report_path.display());
            if !result.report.failures.is_empty() {
                return Err(CliError::Runtime(format!(
                    "campaign had failures, see {}",
                    result.report_path.display()
                )));
            }
            Ok(())
        }
        Command::Map { theta } => {
            let theta = load_theta(&theta, net_count).map_err(CliError::Config)?;
            let (path, map) = run_map(&resolved, &theta, out_dir, cli.jobs)?;
            match map.mean_reduction_s() {
                Some(mean) => println!(
                    "wrote {} (mean reduction over reachable cells: {mean:.1} s)",
                    path.display()
                ),
                None => println!("wrote {} (no cell reached the target)", path.display()),
            }
            Ok(())
        }
    }
}
