//! Constrained Bayesian optimization over closed-loop episodes.
//!
//! Each iteration evaluates a weight vector by running a batch of episodes,
//! reduces them to one performance value (mean cumulative tracking error) and
//! one worst-case slack per monitored constraint, refits one GP surrogate per
//! observable, and proposes the next weights by maximizing an upper-confidence
//! acquisition plus log-barrier terms on the constraint surrogates' lower
//! confidence bounds. A constraint whose lower confidence bound is not
//! positive contributes a minus-infinity barrier, which excludes the point.

use crate::battery::{Trajectory, TrajectoryStep};
use crate::gp::{
    self, fit, GpDataset, GpError, GpModel, HyperBounds, HyperoptOptions, KernelConfig,
};
use crate::rbf::ThetaVec;
use crate::sampling::{derive_seed, HaltonSampler};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid BO configuration: {0}")]
    BadConfig(String),
    #[error("no finite acquisition candidate and no safe incumbent to fall back to")]
    UnrecoverableInfeasibility,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("scenario produced no episodes")]
    EmptyEvaluation,
}

/// Which closed-loop quantity a constraint monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitoredQuantity {
    Soc,
    RcVoltage,
    Temperature,
    TerminalVoltage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Upper,
    Lower,
}

/// One monitored closed-loop bound.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintSpec<S> {
    pub quantity: MonitoredQuantity,
    pub side: BoundSide,
    pub bound: S,
}

impl<S: Scalar> ConstraintSpec<S> {
    pub fn validate(&self) -> Result<(), BoError> {
        if !self.bound.is_finite() {
            return Err(BoError::BadConfig("constraint bound must be finite".into()));
        }
        Ok(())
    }

    fn value(&self, step: &TrajectoryStep<S>) -> S {
        match self.quantity {
            MonitoredQuantity::Soc => step.state.z,
            MonitoredQuantity::RcVoltage => step.state.u1,
            MonitoredQuantity::Temperature => step.state.t,
            MonitoredQuantity::TerminalVoltage => step.terminal_voltage,
        }
    }

    /// Signed margin of one sample: negative once the bound is crossed.
    fn margin(&self, step: &TrajectoryStep<S>) -> S {
        match self.side {
            BoundSide::Upper => self.bound - self.value(step),
            BoundSide::Lower => self.value(step) - self.bound,
        }
    }
}

/// Loop settings. The weight box is shared by every RBF weight.
#[derive(Debug, Clone)]
pub struct BoConfig<S> {
    /// Confidence scaling of the barrier's lower confidence bound.
    pub beta: S,
    /// Barrier penalty weight in the acquisition.
    pub tau: S,
    /// Exploration weight of the performance upper confidence bound.
    pub acquisition_beta: S,
    pub weight_lo: S,
    pub weight_hi: S,
    /// Weight-vector dimension (number of RBF centers).
    pub dim: usize,
    pub n_iterations: usize,
    /// Episodes per iteration, each from a freshly sampled initial condition.
    pub n_initial_conditions: usize,
    /// False runs the unconstrained baseline: the barrier sum is dropped.
    pub constrained: bool,
    pub seed: u64,
    /// Quasi-random candidates scored per proposal.
    pub candidate_samples: usize,
    /// Top candidates refined by projected gradient ascent.
    pub refine_starts: usize,
    pub refine_iters: usize,
    /// Evidence-maximization restarts per surrogate refit.
    pub hyperopt_starts: usize,
    pub hyperopt_iters: usize,
}

impl<S: Scalar> BoConfig<S> {
    pub fn validate(&self) -> Result<(), BoError> {
        if !(self.beta >= S::zero()) {
            return Err(BoError::BadConfig("beta must be non-negative".into()));
        }
        if !(self.tau > S::zero()) {
            return Err(BoError::BadConfig("tau must be positive".into()));
        }
        if self.n_iterations < 1 || self.n_initial_conditions < 1 {
            return Err(BoError::BadConfig(
                "iteration and episode counts must be at least 1".into(),
            ));
        }
        if self.dim == 0 || !(self.weight_lo < self.weight_hi) {
            return Err(BoError::BadConfig("weight box must be non-degenerate".into()));
        }
        if self.candidate_samples == 0 {
            return Err(BoError::BadConfig("need at least one candidate sample".into()));
        }
        Ok(())
    }

    fn normalize(&self, theta: &ThetaVec<S>) -> Vec<S> {
        let w = self.weight_hi - self.weight_lo;
        theta
            .weights()
            .iter()
            .map(|&v| (v - self.weight_lo) / w)
            .collect()
    }

    fn denormalize(&self, xi: &[S]) -> ThetaVec<S> {
        let w = self.weight_hi - self.weight_lo;
        ThetaVec::new(xi.iter().map(|&v| self.weight_lo + v * w).collect())
    }
}

/// One evaluated episode: the closed-loop trajectory plus its initial
/// condition (kept separately so failed episodes stay attributable).
#[derive(Debug, Clone)]
pub struct EpisodeOutcome<S> {
    pub trajectory: Trajectory<S>,
    pub z0: S,
    pub t0: S,
}

/// Something that can run the closed loop for a candidate weight vector.
pub trait Scenario<S: Scalar> {
    fn constraints(&self) -> &[ConstraintSpec<S>];

    /// Run `n_episodes` episodes for iteration `iter` (1-based). Initial
    /// conditions must be a pure function of the scenario seed, `iter`, and
    /// the episode index.
    fn evaluate(&self, theta: &ThetaVec<S>, iter: usize, n_episodes: usize)
        -> Vec<EpisodeOutcome<S>>;
}

/// Mean over episodes of the cumulative squared SOC tracking error.
///
/// Assumes complete (non-failed) trajectories; failed episodes are penalized
/// by the loop before this reduction is reached.
pub fn performance_objective<S: Scalar>(trajectories: &[&Trajectory<S>]) -> S {
    assert!(!trajectories.is_empty(), "need at least one trajectory");
    let mut total = S::zero();
    for traj in trajectories {
        for step in &traj.steps {
            let e = S::one() - step.state.z;
            total += e * e;
        }
    }
    total / cast(trajectories.len() as f64)
}

/// Worst-case (minimum) margin to the bound over all episodes and samples;
/// negative means the bound was crossed.
pub fn constraint_slack<S: Scalar>(trajectories: &[&Trajectory<S>], spec: &ConstraintSpec<S>) -> S {
    assert!(!trajectories.is_empty(), "need at least one trajectory");
    let mut worst = S::infinity();
    for traj in trajectories {
        for step in &traj.steps {
            worst = worst.min(spec.margin(step));
        }
    }
    worst
}

/// Log barrier on the constraint surrogate's lower confidence bound,
/// evaluated at a normalized input. Non-positive bound gives minus infinity
/// (the point is excluded from the acquisition maximization, not an error).
pub fn barrier_term<S: Scalar>(model: &GpModel<S>, xi: &[S], beta: S) -> S {
    let (mean, var) = model.posterior(xi);
    let argument = mean - beta * var.max(S::zero()).sqrt();
    if argument > S::zero() {
        argument.ln()
    } else {
        S::neg_infinity()
    }
}

/// Acquisition at a raw weight vector: performance UCB plus, in constrained
/// mode, the tau-weighted sum of log barriers.
pub fn acquisition<S: Scalar>(
    theta: &ThetaVec<S>,
    perf_model: &GpModel<S>,
    constraint_models: &[GpModel<S>],
    cfg: &BoConfig<S>,
) -> S {
    acquisition_normalized(&cfg.normalize(theta), perf_model, constraint_models, cfg)
}

fn acquisition_normalized<S: Scalar>(
    xi: &[S],
    perf_model: &GpModel<S>,
    constraint_models: &[GpModel<S>],
    cfg: &BoConfig<S>,
) -> S {
    let (mean, var) = perf_model.posterior(xi);
    let ucb = mean + cfg.acquisition_beta * var.max(S::zero()).sqrt();
    if !cfg.constrained {
        return ucb;
    }
    let mut total = ucb;
    for model in constraint_models {
        let b = barrier_term(model, xi, cfg.beta);
        if b == S::neg_infinity() {
            return S::neg_infinity();
        }
        total += cfg.tau * b;
    }
    total
}

/// Proposal for the next iteration.
#[derive(Debug, Clone)]
pub struct Proposal<S> {
    pub theta: ThetaVec<S>,
    /// True when every candidate was excluded and the incumbent was returned.
    pub stalled: bool,
}

/// Maximize the acquisition over the weight box: score a rotated Halton
/// sample, then refine the best candidates (and the incumbent) by projected
/// gradient ascent with finite-difference gradients.
pub fn propose_next<S: Scalar>(
    perf_model: &GpModel<S>,
    constraint_models: &[GpModel<S>],
    incumbent: Option<&ThetaVec<S>>,
    cfg: &BoConfig<S>,
    rng: &mut ChaCha8Rng,
) -> Result<Proposal<S>, BoError> {
    cfg.validate()?;
    let dim = cfg.dim;
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut sampler = HaltonSampler::new(dim, shift);

    let mut candidates: Vec<(S, Vec<S>)> = Vec::with_capacity(cfg.candidate_samples);
    for _ in 0..cfg.candidate_samples {
        let xi: Vec<S> = sampler.next_point().into_iter().map(cast).collect();
        let a = acquisition_normalized(&xi, perf_model, constraint_models, cfg);
        candidates.push((a, xi));
    }

    let mut best: Option<(S, Vec<S>)> = candidates
        .iter()
        .filter(|(a, _)| a.is_finite())
        .max_by(|(a, _), (b, _)| a.partial_cmp(b).expect("finite acquisitions compare"))
        .cloned();

    // Refinement starts: the top finite samples plus the incumbent.
    candidates.retain(|(a, _)| a.is_finite());
    candidates.sort_by(|(a, _), (b, _)| b.partial_cmp(a).expect("finite acquisitions compare"));
    candidates.truncate(cfg.refine_starts);
    if let Some(theta) = incumbent {
        let xi = cfg.normalize(theta);
        let a = acquisition_normalized(&xi, perf_model, constraint_models, cfg);
        candidates.push((a, xi));
        if a.is_finite() && best.as_ref().map_or(true, |(bv, _)| a > *bv) {
            best = Some((a, xi_clone(&candidates)));
        }
    }

    for (value, xi) in &candidates {
        if !value.is_finite() {
            continue;
        }
        let (rv, rx) = refine_ascent(xi, *value, perf_model, constraint_models, cfg);
        if rv.is_finite() && best.as_ref().map_or(true, |(bv, _)| rv > *bv) {
            best = Some((rv, rx));
        }
    }

    match best {
        Some((_, xi)) => Ok(Proposal {
            theta: cfg.denormalize(&xi),
            stalled: false,
        }),
        None => match incumbent {
            Some(theta) => Ok(Proposal {
                theta: theta.clone(),
                stalled: true,
            }),
            None => Err(BoError::UnrecoverableInfeasibility),
        },
    }
}

fn xi_clone<S: Clone>(candidates: &[(S, Vec<S>)]) -> Vec<S> {
    candidates.last().expect("just pushed").1.clone()
}

/// Projected gradient ascent on the normalized cube with central finite
/// differences; any probe that hits the excluded region stops that start.
fn refine_ascent<S: Scalar>(
    xi0: &[S],
    v0: S,
    perf_model: &GpModel<S>,
    constraint_models: &[GpModel<S>],
    cfg: &BoConfig<S>,
) -> (S, Vec<S>) {
    let dim = xi0.len();
    let h: S = cast(1e-5);
    let mut xi = xi0.to_vec();
    let mut value = v0;
    let mut step: S = cast(0.05);
    let min_step: S = cast(1e-10);
    for _ in 0..cfg.refine_iters {
        let mut grad = vec![S::zero(); dim];
        let mut blocked = false;
        for d in 0..dim {
            let mut up = xi.clone();
            let mut dn = xi.clone();
            up[d] = (up[d] + h).min(S::one());
            dn[d] = (dn[d] - h).max(S::zero());
            let fu = acquisition_normalized(&up, perf_model, constraint_models, cfg);
            let fd = acquisition_normalized(&dn, perf_model, constraint_models, cfg);
            if !fu.is_finite() || !fd.is_finite() {
                blocked = true;
                break;
            }
            let span = up[d] - dn[d];
            grad[d] = if span > S::zero() {
                (fu - fd) / span
            } else {
                S::zero()
            };
        }
        if blocked {
            break;
        }
        let norm = grad.iter().fold(S::zero(), |a, g| a.max(g.abs()));
        if !(norm > S::zero()) {
            break;
        }
        let mut improved = false;
        while step >= min_step {
            let trial: Vec<S> = xi
                .iter()
                .zip(grad.iter())
                .map(|(&x, &g)| (x + step * g / norm).max(S::zero()).min(S::one()))
                .collect();
            let tv = acquisition_normalized(&trial, perf_model, constraint_models, cfg);
            if tv.is_finite() && tv > value {
                xi = trial;
                value = tv;
                improved = true;
                break;
            }
            step = step * cast(0.5);
        }
        if !improved {
            break;
        }
    }
    (value, xi)
}

/// Per-episode bookkeeping kept in the history.
#[derive(Debug, Clone)]
pub struct EpisodeMeta<S> {
    pub z0: S,
    pub t0: S,
    pub failed: bool,
    /// Cumulative squared tracking error of this episode alone.
    pub tracking_cost: S,
}

/// One iteration record: the evaluated weights, the scalar observations fed
/// to the surrogates, and the violation flag used for reporting.
#[derive(Debug, Clone)]
pub struct IterationRecord<S> {
    pub iteration: usize,
    pub theta: ThetaVec<S>,
    pub g0: S,
    pub slacks: Vec<S>,
    /// True when any monitored quantity crossed its bound in any episode.
    pub violated: bool,
    pub failed_episodes: usize,
    /// True when this iteration re-evaluated the incumbent because the
    /// acquisition had no feasible candidate.
    pub stalled: bool,
    pub episodes: Vec<EpisodeMeta<S>>,
    /// Kernel hyperparameters after the refit that followed this record
    /// (performance model first, then one per constraint).
    pub kernels: Vec<KernelConfig<S>>,
}

#[derive(Debug, Clone)]
pub struct BoHistory<S> {
    pub records: Vec<IterationRecord<S>>,
    /// Index of the best violation-free, failure-free record, if any.
    pub best_safe: Option<usize>,
}

impl<S: Scalar> BoHistory<S> {
    pub fn best_safe_record(&self) -> Option<&IterationRecord<S>> {
        self.best_safe.map(|i| &self.records[i])
    }

    /// Best record by performance alone, ignoring violations (the
    /// unconstrained baseline's selection rule).
    pub fn best_overall(&self) -> Option<&IterationRecord<S>> {
        self.records
            .iter()
            .filter(|r| r.g0.is_finite())
            .min_by(|a, b| a.g0.partial_cmp(&b.g0).expect("finite g0"))
    }

    pub fn violation_count(&self) -> usize {
        self.records.iter().filter(|r| r.violated).count()
    }
}

/// Prior kernel for a surrogate with fewer than two observations: the prior
/// standard deviation is set to the observation magnitude so the lower
/// confidence bound shrinks toward zero away from the data, which keeps early
/// proposals near the safe seed.
fn initial_config<S: Scalar>(data: &GpDataset<S>) -> KernelConfig<S> {
    let mean = data.target_mean();
    let var = data.target_variance();
    KernelConfig {
        signal_variance: var.max(mean * mean).max(cast(1e-8)),
        lengthscales: vec![cast(0.5); data.dim().max(1)],
        noise_variance: var.max(mean * mean).max(cast(1e-8)) * cast(1e-4),
        mean,
    }
}

fn refit<S: Scalar>(
    data: &GpDataset<S>,
    cfg: &BoConfig<S>,
    seed: u64,
) -> Result<GpModel<S>, GpError> {
    let config = if data.len() >= 2 {
        let bounds = HyperBounds::for_unit_cube(data.target_variance());
        let opts = HyperoptOptions {
            random_starts: cfg.hyperopt_starts,
            max_iters: cfg.hyperopt_iters,
            seed,
        };
        gp::optimize_hyperparameters(data, &bounds, &opts).config
    } else {
        initial_config(data)
    };
    fit(data.clone(), config)
}

/// Violation check straight from the trajectories (works on partial
/// trajectories from failed episodes too).
fn any_bound_crossed<S: Scalar>(
    outcomes: &[EpisodeOutcome<S>],
    constraints: &[ConstraintSpec<S>],
) -> bool {
    outcomes.iter().any(|o| {
        o.trajectory.steps.iter().any(|step| {
            constraints
                .iter()
                .any(|spec| spec.margin(step) < S::zero())
        })
    })
}

/// Run the multi-episode tuning loop. Iteration 1 always evaluates the zero
/// weight vector (the safe seed); every later iteration evaluates the
/// acquisition maximizer proposed from the surrogates refit on all data so
/// far. All randomness is derived from the config seed.
pub fn run_loop<S: Scalar, Sc: Scenario<S>>(
    cfg: &BoConfig<S>,
    scenario: &Sc,
) -> Result<BoHistory<S>, BoError> {
    cfg.validate()?;
    let constraints = scenario.constraints();
    for spec in constraints {
        spec.validate()?;
    }

    let mut perf_data = GpDataset::<S>::empty();
    let mut slack_data: Vec<GpDataset<S>> = vec![GpDataset::empty(); constraints.len()];
    let mut history = BoHistory {
        records: Vec::with_capacity(cfg.n_iterations),
        best_safe: None,
    };

    let mut theta = ThetaVec::zeros(cfg.dim);
    let mut stalled = false;

    for iter in 1..=cfg.n_iterations {
        let outcomes = scenario.evaluate(&theta, iter, cfg.n_initial_conditions);
        if outcomes.is_empty() {
            return Err(BoError::EmptyEvaluation);
        }
        let failed_episodes = outcomes.iter().filter(|o| o.trajectory.is_failed()).count();
        let trajs: Vec<&Trajectory<S>> = outcomes.iter().map(|o| &o.trajectory).collect();

        let (g0, slacks) = if failed_episodes == 0 {
            let g0 = performance_objective(&trajs);
            let slacks: Vec<S> = constraints
                .iter()
                .map(|spec| constraint_slack(&trajs, spec))
                .collect();
            (g0, slacks)
        } else {
            (penalty_g0(&history), penalty_slacks(&history, constraints.len()))
        };
        let violated = any_bound_crossed(&outcomes, constraints);

        let episodes: Vec<EpisodeMeta<S>> = outcomes
            .iter()
            .map(|o| EpisodeMeta {
                z0: o.z0,
                t0: o.t0,
                failed: o.trajectory.is_failed(),
                tracking_cost: o
                    .trajectory
                    .steps
                    .iter()
                    .fold(S::zero(), |a, s| {
                        let e = S::one() - s.state.z;
                        a + e * e
                    }),
            })
            .collect();

        perf_data
            .push(cfg.normalize(&theta), -g0)
            .map_err(BoError::Gp)?;
        for (data, &s) in slack_data.iter_mut().zip(slacks.iter()) {
            data.push(cfg.normalize(&theta), s).map_err(BoError::Gp)?;
        }

        let record = IterationRecord {
            iteration: iter,
            theta: theta.clone(),
            g0,
            slacks,
            violated,
            failed_episodes,
            stalled,
            episodes,
            kernels: Vec::new(),
        };
        let is_safe = !record.violated && record.failed_episodes == 0;
        history.records.push(record);
        if is_safe {
            let idx = history.records.len() - 1;
            history.best_safe = match history.best_safe {
                Some(prev) if history.records[prev].g0 <= history.records[idx].g0 => Some(prev),
                _ => Some(idx),
            };
        }

        let perf_model = refit(&perf_data, cfg, derive_seed(cfg.seed, 0xF17, iter as u64))?;
        let constraint_models: Vec<GpModel<S>> = slack_data
            .iter()
            .enumerate()
            .map(|(i, data)| {
                refit(
                    data,
                    cfg,
                    derive_seed(cfg.seed, 0xC0_u64 + i as u64, iter as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        let kernels: Vec<KernelConfig<S>> = std::iter::once(perf_model.config().clone())
            .chain(constraint_models.iter().map(|m| m.config().clone()))
            .collect();
        history.records.last_mut().expect("just pushed").kernels = kernels;

        if iter < cfg.n_iterations {
            let incumbent = history.best_safe_record().map(|r| r.theta.clone());
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x9420_u64, iter as u64));
            let proposal = propose_next(
                &perf_model,
                &constraint_models,
                incumbent.as_ref(),
                cfg,
                &mut rng,
            )?;
            theta = proposal.theta;
            stalled = proposal.stalled;
        }
    }

    Ok(history)
}

/// Failure penalty for the performance observation: 5% worse than the worst
/// value seen so far (or the episode-length ceiling when nothing has been
/// observed yet).
fn penalty_g0<S: Scalar>(history: &BoHistory<S>) -> S {
    let worst = history
        .records
        .iter()
        .map(|r| r.g0)
        .fold(S::neg_infinity(), S::max);
    if worst.is_finite() {
        worst * cast(1.05)
    } else {
        cast(1e6)
    }
}

/// Failure penalty for each slack observation: the smallest observed slack
/// minus one empirical standard deviation (minus one when nothing has been
/// observed yet).
fn penalty_slacks<S: Scalar>(history: &BoHistory<S>, n_constraints: usize) -> Vec<S> {
    (0..n_constraints)
        .map(|i| {
            let observed: Vec<S> = history.records.iter().map(|r| r.slacks[i]).collect();
            if observed.is_empty() {
                return -S::one();
            }
            let min = observed.iter().copied().fold(S::infinity(), S::min);
            let mean = observed.iter().fold(S::zero(), |a, &b| a + b)
                / cast(observed.len() as f64);
            let var = observed
                .iter()
                .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                / cast(observed.len() as f64);
            min - var.sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::BatteryState;
    use approx::assert_relative_eq;

    fn traj_from_socs(socs: &[f64]) -> Trajectory<f64> {
        Trajectory {
            steps: socs
                .iter()
                .map(|&z| TrajectoryStep {
                    state: BatteryState::new(z, 0.0, 300.0),
                    current: 0.0,
                    terminal_voltage: 3.7,
                })
                .collect(),
            failed_at: None,
            dt: 10.0,
        }
    }

    fn traj_with_temps(temps: &[f64]) -> Trajectory<f64> {
        Trajectory {
            steps: temps
                .iter()
                .map(|&t| TrajectoryStep {
                    state: BatteryState::new(0.5, 0.0, t),
                    current: 0.0,
                    terminal_voltage: 3.7,
                })
                .collect(),
            failed_at: None,
            dt: 10.0,
        }
    }

    #[test]
    fn performance_objective_examples() {
        let perfect = traj_from_socs(&[1.0; 11]);
        assert_eq!(performance_objective(&[&perfect]), 0.0);

        let empty_soc = traj_from_socs(&[0.0; 11]);
        assert_eq!(performance_objective(&[&empty_soc]), 11.0);

        // Two hand-listed sequences: sums 0.25+0.09+0.01 = 0.35 and
        // 1.0+0.25+0.0 = 1.25; mean 0.8.
        let a = traj_from_socs(&[0.5, 0.7, 0.9]);
        let b = traj_from_socs(&[0.0, 0.5, 1.0]);
        assert_relative_eq!(performance_objective(&[&a, &b]), 0.8, max_relative = 1e-14);
    }

    #[test]
    fn constraint_slack_examples() {
        let spec = ConstraintSpec {
            quantity: MonitoredQuantity::Temperature,
            side: BoundSide::Upper,
            bound: 318.0,
        };
        let pinned = traj_with_temps(&[310.0, 318.0, 305.0]);
        assert_eq!(constraint_slack(&[&pinned], &spec), 0.0);

        let cool = traj_with_temps(&[300.0, 315.0, 312.0]);
        assert_eq!(constraint_slack(&[&cool], &spec), 3.0);

        // Adding an episode can only decrease the slack.
        let warmer = traj_with_temps(&[314.0, 316.5]);
        let single = constraint_slack(&[&cool], &spec);
        let double = constraint_slack(&[&cool, &warmer], &spec);
        assert!(double <= single);
        assert_eq!(double, 1.5);
    }

    #[test]
    fn constraint_slack_lower_side() {
        let spec = ConstraintSpec {
            quantity: MonitoredQuantity::TerminalVoltage,
            side: BoundSide::Lower,
            bound: 2.5,
        };
        let traj = traj_from_socs(&[0.5; 4]);
        assert_relative_eq!(constraint_slack(&[&traj], &spec), 1.2, max_relative = 1e-12);
    }

    #[test]
    fn slack_matches_brute_force_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = ConstraintSpec {
            quantity: MonitoredQuantity::Temperature,
            side: BoundSide::Upper,
            bound: 318.0,
        };
        for _ in 0..100 {
            let trajs: Vec<Trajectory<f64>> = (0..3)
                .map(|_| {
                    let temps: Vec<f64> =
                        (0..20).map(|_| rng.gen_range(290.0..330.0)).collect();
                    traj_with_temps(&temps)
                })
                .collect();
            let refs: Vec<&Trajectory<f64>> = trajs.iter().collect();
            let got = constraint_slack(&refs, &spec);
            let mut brute = f64::INFINITY;
            for traj in &trajs {
                for step in &traj.steps {
                    let margin = 318.0 - step.state.t;
                    if margin < brute {
                        brute = margin;
                    }
                }
            }
            assert_eq!(got, brute);
        }
    }

    fn fitted_model(inputs: Vec<Vec<f64>>, targets: Vec<f64>, cfg: KernelConfig<f64>) -> GpModel<f64> {
        fit(GpDataset::new(inputs, targets).unwrap(), cfg).unwrap()
    }

    fn prior_model(mean: f64, signal: f64, dim: usize) -> GpModel<f64> {
        fit(
            GpDataset::empty(),
            KernelConfig {
                signal_variance: signal,
                lengthscales: vec![0.5; dim],
                noise_variance: 1e-6,
                mean,
            },
        )
        .unwrap()
    }

    #[test]
    fn barrier_examples() {
        // Empty models give the prior posterior, so the hand values are exact.
        let m = prior_model(1.0, 0.0001, 1);
        // argument = 1 - beta * 0.01
        assert_relative_eq!(barrier_term(&m, &[0.3], 0.0), 0.0, epsilon = 1e-12);

        let m = prior_model(std::f64::consts::E, 1.0, 1);
        assert_relative_eq!(barrier_term(&m, &[0.3], 0.0), 1.0, epsilon = 1e-12);

        let m = prior_model(0.5, 0.04, 1);
        assert_relative_eq!(
            barrier_term(&m, &[0.3], 1.0),
            0.3f64.ln(),
            epsilon = 1e-12
        );

        let m = prior_model(0.1, 1.0, 1);
        assert_eq!(barrier_term(&m, &[0.3], 1.0), f64::NEG_INFINITY);
    }

    fn small_cfg(constrained: bool) -> BoConfig<f64> {
        BoConfig {
            beta: 1.0,
            tau: 1.0,
            acquisition_beta: 2.0,
            weight_lo: -5.0,
            weight_hi: 5.0,
            dim: 1,
            n_iterations: 3,
            n_initial_conditions: 2,
            constrained,
            seed: 9,
            candidate_samples: 512,
            refine_starts: 8,
            refine_iters: 40,
            hyperopt_starts: 2,
            hyperopt_iters: 40,
        }
    }

    #[test]
    fn acquisition_unconstrained_is_pure_ucb() {
        let cfg = small_cfg(false);
        let perf = prior_model(2.0, 0.25, 1);
        let hostile = prior_model(-1.0, 1.0, 1); // barrier would be -inf
        let theta = ThetaVec::new(vec![0.0]);
        let a = acquisition(&theta, &perf, &[hostile], &cfg);
        // UCB = 2 + 2 * 0.5 = 3, barrier ignored.
        assert_relative_eq!(a, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn acquisition_sentinel_absorbs() {
        let cfg = small_cfg(true);
        let perf = prior_model(100.0, 0.25, 1);
        let fine = prior_model(1.0, 0.0001, 1);
        let hostile = prior_model(-1.0, 1.0, 1);
        let theta = ThetaVec::new(vec![0.0]);
        assert_eq!(
            acquisition(&theta, &perf, &[fine.clone(), hostile], &cfg),
            f64::NEG_INFINITY
        );
        // Hand value with two benign barriers: 100 + 2*0.5 + 2*ln(1 - 0.01).
        let a = acquisition(&theta, &perf, &[fine.clone(), fine], &cfg);
        assert_relative_eq!(a, 101.0 + 2.0 * 0.99f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn acquisition_hand_sum_with_barriers() {
        let cfg = small_cfg(true);
        // Prior posteriors are hand-computable: perf (m=2, k=0.25),
        // constraints (m=0.5, k=0.04) and (m=e, k=0).
        let perf = prior_model(2.0, 0.25, 1);
        let c1 = prior_model(0.5, 0.04, 1);
        let c2 = prior_model(std::f64::consts::E, 1e-12, 1);
        let theta = ThetaVec::new(vec![0.0]);
        let got = acquisition(&theta, &perf, &[c1, c2], &cfg);
        let expected = (2.0 + 2.0 * 0.5) + 1.0 * (0.3f64.ln() + (std::f64::consts::E - 1e-6).ln());
        assert_relative_eq!(got, expected, epsilon = 1e-5);
    }

    /// Acquisition built to be maximal at the upper box corner: increasing
    /// targets with the UCB bonus growing away from the data.
    #[test]
    fn proposal_finds_corner_against_grid_oracle() {
        let cfg = BoConfig {
            dim: 1,
            constrained: false,
            ..small_cfg(false)
        };
        let perf = fitted_model(
            vec![vec![0.1], vec![0.3], vec![0.5]],
            vec![0.1, 0.3, 0.5],
            KernelConfig {
                signal_variance: 1.0,
                lengthscales: vec![0.4],
                noise_variance: 1e-6,
                mean: 0.0,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proposal = propose_next(&perf, &[], None, &cfg, &mut rng).unwrap();
        // Grid oracle over the normalized box.
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=100_000 {
            let xi = k as f64 / 100_000.0;
            let theta = ThetaVec::new(vec![-5.0 + 10.0 * xi]);
            let a = acquisition(&theta, &perf, &[], &cfg);
            if a > best.0 {
                best = (a, theta.weights()[0]);
            }
        }
        assert!(
            (proposal.theta.weights()[0] - best.1).abs() <= 1e-3 * 10.0,
            "proposed {} vs oracle {}",
            proposal.theta.weights()[0],
            best.1
        );
    }

    #[test]
    fn proposal_beats_all_raw_samples_and_is_deterministic() {
        let cfg = small_cfg(true);
        let perf = fitted_model(
            vec![vec![0.5], vec![0.2]],
            vec![-3.0, -4.0],
            KernelConfig {
                signal_variance: 2.0,
                lengthscales: vec![0.3],
                noise_variance: 1e-4,
                mean: -3.5,
            },
        );
        let slack = fitted_model(
            vec![vec![0.5], vec![0.2]],
            vec![0.2, 0.05],
            KernelConfig {
                signal_variance: 0.05,
                lengthscales: vec![0.3],
                noise_variance: 1e-6,
                mean: 0.1,
            },
        );
        let incumbent = ThetaVec::new(vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p1 = propose_next(&perf, std::slice::from_ref(&slack), Some(&incumbent), &cfg, &mut rng)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p2 = propose_next(&perf, std::slice::from_ref(&slack), Some(&incumbent), &cfg, &mut rng)
            .unwrap();
        assert_eq!(p1.theta, p2.theta);
        assert!(!p1.stalled);

        // Best-of contract: the returned acquisition dominates a fresh
        // rotated sample of the same size.
        let a_star = acquisition(&p1.theta, &perf, std::slice::from_ref(&slack), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shift: Vec<f64> = (0..1).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut sampler = HaltonSampler::new(1, shift);
        for _ in 0..cfg.candidate_samples {
            let xi: Vec<f64> = sampler.next_point();
            let theta = cfg.denormalize(&[xi[0]]);
            assert!(acquisition(&theta, &perf, std::slice::from_ref(&slack), &cfg) <= a_star + 1e-12);
        }
    }

    #[test]
    fn proposal_stalls_to_incumbent_when_everything_excluded() {
        let cfg = small_cfg(true);
        let perf = prior_model(0.0, 1.0, 1);
        // Negative prior mean slack: every point excluded.
        let hostile = prior_model(-1.0, 0.01, 1);
        let incumbent = ThetaVec::new(vec![0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = propose_next(&perf, &[hostile], Some(&incumbent), &cfg, &mut rng).unwrap();
        assert!(p.stalled);
        assert_eq!(p.theta, incumbent);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hostile = prior_model(-1.0, 0.01, 1);
        let err = propose_next(&perf, &[hostile], None, &cfg, &mut rng);
        assert!(matches!(err, Err(BoError::UnrecoverableInfeasibility)));
    }

    /// Synthetic scenario: SOC ramps faster as the mean weight drops, and a
    /// monitored "voltage" overshoots once the mean weight is aggressive.
    struct SyntheticScenario {
        constraints: Vec<ConstraintSpec<f64>>,
        steps: usize,
    }

    impl SyntheticScenario {
        fn new() -> Self {
            Self {
                constraints: vec![ConstraintSpec {
                    quantity: MonitoredQuantity::TerminalVoltage,
                    side: BoundSide::Upper,
                    bound: 4.2,
                }],
                steps: 20,
            }
        }
    }

    impl Scenario<f64> for SyntheticScenario {
        fn constraints(&self) -> &[ConstraintSpec<f64>] {
            &self.constraints
        }

        fn evaluate(
            &self,
            theta: &ThetaVec<f64>,
            iter: usize,
            n_episodes: usize,
        ) -> Vec<EpisodeOutcome<f64>> {
            let mean_w: f64 =
                theta.weights().iter().sum::<f64>() / theta.len().max(1) as f64;
            let aggression = (-mean_w / 5.0).clamp(-1.0, 1.0);
            (0..n_episodes)
                .map(|ep| {
                    let jitter =
                        (derive_seed(13, iter as u64, ep as u64) % 1000) as f64 / 1e5;
                    let rate = 0.03 + 0.02 * aggression + jitter;
                    let steps: Vec<TrajectoryStep<f64>> = (0..=self.steps)
                        .map(|k| {
                            let z = (k as f64 * rate).min(1.0);
                            TrajectoryStep {
                                state: BatteryState::new(z, 0.0, 300.0),
                                current: 0.0,
                                terminal_voltage: 3.9 + 0.35 * aggression.max(0.0) * z,
                            }
                        })
                        .collect();
                    EpisodeOutcome {
                        trajectory: Trajectory {
                            steps,
                            failed_at: None,
                            dt: 10.0,
                        },
                        z0: 0.0,
                        t0: 300.0,
                    }
                })
                .collect()
        }
    }

    #[test]
    fn single_iteration_history_is_theta_zero() {
        let cfg = BoConfig {
            n_iterations: 1,
            ..small_cfg(true)
        };
        let scenario = SyntheticScenario::new();
        let history = run_loop(&cfg, &scenario).unwrap();
        assert_eq!(history.records.len(), 1);
        assert_eq!(history.records[0].theta, ThetaVec::zeros(1));
        assert!(!history.records[0].violated);
        assert_eq!(history.best_safe, Some(0));
    }

    #[test]
    fn rerun_with_same_seed_is_identical() {
        let cfg = BoConfig {
            n_iterations: 4,
            ..small_cfg(true)
        };
        let scenario = SyntheticScenario::new();
        let a = run_loop(&cfg, &scenario).unwrap();
        let b = run_loop(&cfg, &scenario).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.theta, rb.theta);
            assert_eq!(ra.g0.to_bits(), rb.g0.to_bits());
            for (sa, sb) in ra.slacks.iter().zip(rb.slacks.iter()) {
                assert_eq!(sa.to_bits(), sb.to_bits());
            }
        }
    }

    #[test]
    fn data_grows_by_one_record_per_iteration_and_incumbent_is_monotone() {
        let cfg = BoConfig {
            n_iterations: 6,
            ..small_cfg(true)
        };
        let scenario = SyntheticScenario::new();
        let history = run_loop(&cfg, &scenario).unwrap();
        assert_eq!(history.records.len(), 6);
        for (i, r) in history.records.iter().enumerate() {
            assert_eq!(r.iteration, i + 1);
        }
        // Monotone incumbent: best safe g0 never worsens as records accrue.
        let mut best = f64::INFINITY;
        let mut seen = Vec::new();
        for r in &history.records {
            if !r.violated && r.failed_episodes == 0 {
                best = best.min(r.g0);
            }
            seen.push(best);
        }
        for w in seen.windows(2) {
            assert!(w[1] <= w[0]);
        }
        if let Some(idx) = history.best_safe {
            assert_relative_eq!(history.records[idx].g0, best);
        }
    }

    #[test]
    fn theta_zero_seed_remains_incumbent_fallback() {
        let cfg = BoConfig {
            n_iterations: 3,
            ..small_cfg(true)
        };
        let scenario = SyntheticScenario::new();
        let history = run_loop(&cfg, &scenario).unwrap();
        // Iteration 1 was violation-free in this scenario, so an incumbent
        // exists no matter what later iterations did.
        assert!(history.best_safe.is_some());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_cfg(true);
        cfg.tau = 0.0;
        assert!(run_loop(&cfg, &SyntheticScenario::new()).is_err());
        let mut cfg = small_cfg(true);
        cfg.weight_lo = 5.0;
        cfg.weight_hi = -5.0;
        assert!(cfg.validate().is_err());
    }
}
