//! Short-horizon MPC for charging-current selection.
//!
//! At each sampling instant the controller solves a box-constrained optimal
//! control problem by direct single shooting over the current sequence. The
//! stage cost combines an SOC tracking term, softened temperature and voltage
//! penalties, and the learnable RBF shaping term; state limits enter only
//! through those penalties. The prediction model is the (deliberately
//! mismatched) ECM rolled out without SOC clamping, which keeps the objective
//! smooth, and the objective gradient is assembled by a reverse sweep through
//! the rollout Jacobians.

use crate::battery::{
    step_with_jacobian, step_unclamped, terminal_voltage, terminal_voltage_with_grad,
    BatteryState, ControllerError, CurrentController, EcmParams,
};
use crate::optim::{minimize_box, Bounds, MinimizeOptions, MinimizeOutcome, Objective};
use crate::rbf::{rbf_cost, rbf_cost_with_grad, RbfError, RbfNetwork, ThetaVec};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    BadConfig(String),
    #[error("non-finite measured state")]
    NonFiniteState,
    #[error("warm start has length {got}, horizon is {expected}")]
    WarmStartLength { got: usize, expected: usize },
    #[error(transparent)]
    Rbf(#[from] RbfError),
}

/// Inner-solver settings for the per-step OCP.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig<S> {
    /// Projected-gradient stationarity tolerance.
    pub tol_kkt: S,
    pub max_iters: usize,
    /// Extra random restarts besides the (shifted) warm start.
    pub random_starts: usize,
    /// Seed for the restart sampler; restarts are a pure function of this
    /// seed so repeated solves on identical inputs are bitwise identical.
    pub seed: u64,
}

impl<S: Scalar> Default for SolverConfig<S> {
    fn default() -> Self {
        Self {
            tol_kkt: cast(1e-6),
            max_iters: 200,
            random_starts: 2,
            seed: 0,
        }
    }
}

/// MPC problem data: horizon, input box, soft-constraint weights and
/// thresholds, and the prediction model.
#[derive(Debug, Clone)]
pub struct MpcConfig<S> {
    pub horizon_n: usize,
    pub i_min: S,
    pub i_max: S,
    /// Temperature penalty weight (1/K^2).
    pub gamma_t: S,
    /// Terminal-voltage penalty weight (1/V^2).
    pub gamma_vt: S,
    pub t_max: S,
    pub vt_max: S,
    /// Lower voltage limit; monitored in closed loop, not part of the cost.
    pub vt_min: S,
    /// Temperature back-off: the penalty activates at `t_max - slack_t`.
    pub slack_t: S,
    /// Voltage back-off: the penalty activates at `vt_max - slack_vt`.
    pub slack_vt: S,
    pub prediction_params: EcmParams<S>,
    pub solver: SolverConfig<S>,
}

impl<S: Scalar> MpcConfig<S> {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon_n < 1 {
            return Err(MpcError::BadConfig("horizon must be at least 1".into()));
        }
        if !(self.i_min <= self.i_max) {
            return Err(MpcError::BadConfig("i_min must not exceed i_max".into()));
        }
        for (name, v) in [
            ("gamma_t", self.gamma_t),
            ("gamma_vt", self.gamma_vt),
            ("slack_t", self.slack_t),
            ("slack_vt", self.slack_vt),
        ] {
            if !(v >= S::zero()) {
                return Err(MpcError::BadConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    fn input_bounds(&self) -> Bounds<S> {
        Bounds::uniform(self.horizon_n, self.i_min, self.i_max)
    }
}

/// Stage cost: SOC tracking, softened temperature/voltage hinge penalties,
/// and the RBF shaping term.
pub fn stage_cost<S: Scalar>(
    x_pred: &BatteryState<S>,
    vt_pred: S,
    theta: &ThetaVec<S>,
    cfg: &MpcConfig<S>,
    net: &RbfNetwork<S>,
) -> S {
    let track = (S::one() - x_pred.z) * (S::one() - x_pred.z);
    let ht = (x_pred.t - (cfg.t_max - cfg.slack_t)).max(S::zero());
    let hv = (vt_pred - (cfg.vt_max - cfg.slack_vt)).max(S::zero());
    track + cfg.gamma_t * ht * ht + cfg.gamma_vt * hv * hv + rbf_cost(vt_pred, x_pred.t, theta, net)
}

/// Stage cost together with its partials `(c, dc/dz, dc/dT, dc/dV)`.
fn stage_cost_with_partials<S: Scalar>(
    x: &BatteryState<S>,
    vt: S,
    theta: &ThetaVec<S>,
    cfg: &MpcConfig<S>,
    net: &RbfNetwork<S>,
) -> (S, S, S, S) {
    let two: S = cast(2.0);
    let track = (S::one() - x.z) * (S::one() - x.z);
    let ht = (x.t - (cfg.t_max - cfg.slack_t)).max(S::zero());
    let hv = (vt - (cfg.vt_max - cfg.slack_vt)).max(S::zero());
    let (rbf, rbf_dv, rbf_dt) = rbf_cost_with_grad(vt, x.t, theta, net);
    let c = track + cfg.gamma_t * ht * ht + cfg.gamma_vt * hv * hv + rbf;
    let dz = -two * (S::one() - x.z);
    let dt = two * cfg.gamma_t * ht + rbf_dt;
    let dv = two * cfg.gamma_vt * hv + rbf_dv;
    (c, dz, dt, dv)
}

/// The shooting objective `J(u) = sum_j c(x_{j+1}, V(x_{j+1}, u_j))` where the
/// rollout starts from the measured state and uses the prediction parameters.
///
/// Evaluating the stage cost at the arrival state keeps the SOC tracking term
/// responsive to the input even at horizon one; the measured-state term it
/// replaces is an additive constant.
pub struct OcpObjective<'a, S: Scalar> {
    x0: BatteryState<S>,
    theta: &'a ThetaVec<S>,
    cfg: &'a MpcConfig<S>,
    net: &'a RbfNetwork<S>,
}

impl<'a, S: Scalar> OcpObjective<'a, S> {
    pub fn new(
        x0: BatteryState<S>,
        theta: &'a ThetaVec<S>,
        cfg: &'a MpcConfig<S>,
        net: &'a RbfNetwork<S>,
    ) -> Self {
        Self {
            x0,
            theta,
            cfg,
            net,
        }
    }
}

impl<S: Scalar> Objective<S> for OcpObjective<'_, S> {
    fn value(&mut self, u: &[S]) -> S {
        let p = &self.cfg.prediction_params;
        let mut x = self.x0;
        let mut total = S::zero();
        for &current in u {
            x = step_unclamped(&x, current, p);
            let vt = terminal_voltage(&x, current, p);
            total += stage_cost(&x, vt, self.theta, self.cfg, self.net);
        }
        total
    }

    fn value_grad(&mut self, u: &[S], grad: &mut [S]) -> S {
        let p = &self.cfg.prediction_params;
        let n = u.len();
        let mut x = self.x0;
        let mut total = S::zero();
        // Forward pass: store per-stage Jacobians, cost partials w.r.t. the
        // arrival state, and the direct input partial.
        let mut jac_a = Vec::with_capacity(n);
        let mut jac_b = Vec::with_capacity(n);
        let mut stage_x = Vec::with_capacity(n);
        let mut stage_u = Vec::with_capacity(n);
        for &current in u {
            let (next, jac) = step_with_jacobian(&x, current, p);
            let (vt, dvt) = terminal_voltage_with_grad(&next, current, p);
            let (c, cz, ct, cv) = stage_cost_with_partials(&next, vt, self.theta, self.cfg, self.net);
            total += c;
            jac_a.push(jac.a);
            jac_b.push(jac.b);
            stage_x.push([cz + cv * dvt[0], cv * dvt[1], ct + cv * dvt[2]]);
            stage_u.push(cv * dvt[3]);
            x = next;
        }
        // Reverse sweep: mu accumulates dJ/dx_{j+1}.
        let mut mu = [S::zero(); 3];
        for j in (0..n).rev() {
            for k in 0..3 {
                mu[k] += stage_x[j][k];
            }
            grad[j] = stage_u[j]
                + jac_b[j][0] * mu[0]
                + jac_b[j][1] * mu[1]
                + jac_b[j][2] * mu[2];
            let a = &jac_a[j];
            let prev = [
                a[0][0] * mu[0] + a[1][0] * mu[1] + a[2][0] * mu[2],
                a[0][1] * mu[0] + a[1][1] * mu[1] + a[2][1] * mu[2],
                a[0][2] * mu[0] + a[1][2] * mu[1] + a[2][2] * mu[2],
            ];
            mu = prev;
        }
        total
    }
}

/// Result of one multi-start solve.
#[derive(Debug, Clone)]
pub struct OcpSolution<S> {
    pub inputs: Vec<S>,
    pub cost: S,
    /// False when the winning start hit the iteration cap before reaching the
    /// stationarity tolerance; the inputs are still the best iterate found.
    pub converged: bool,
    pub iterations: usize,
    pub grad_pnorm: S,
    /// Final cost reached from each start (warm start first).
    pub start_costs: Vec<S>,
}

/// Solve the OCP by projected BFGS from the warm start plus random restarts.
///
/// A warm start that is already stationary is returned immediately without
/// running the restarts.
pub fn solve_ocp<S: Scalar>(
    x_meas: &BatteryState<S>,
    theta: &ThetaVec<S>,
    cfg: &MpcConfig<S>,
    net: &RbfNetwork<S>,
    warm_start: Option<&[S]>,
) -> Result<OcpSolution<S>, MpcError> {
    cfg.validate()?;
    if !x_meas.is_finite() {
        return Err(MpcError::NonFiniteState);
    }
    if theta.len() != net.count() {
        return Err(MpcError::Rbf(RbfError::ThetaMismatch {
            theta: theta.len(),
            network: net.count(),
        }));
    }
    let n = cfg.horizon_n;
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(MpcError::WarmStartLength {
                got: w.len(),
                expected: n,
            });
        }
    }
    let bounds = cfg.input_bounds();
    let opts = MinimizeOptions {
        tol: cfg.solver.tol_kkt,
        max_iters: cfg.solver.max_iters,
        ..Default::default()
    };
    let mut objective = OcpObjective::new(*x_meas, theta, cfg, net);

    let half = (cfg.i_min + cfg.i_max) * cast(0.5);
    let first: Vec<S> = warm_start.map(<[S]>::to_vec).unwrap_or_else(|| vec![half; n]);

    let mut best: Option<MinimizeOutcome<S>> = None;
    let mut start_costs = Vec::new();
    let outcome = minimize_box(&mut objective, &first, &bounds, &opts);
    let warm_stationary = outcome.converged && outcome.iterations == 0;
    start_costs.push(outcome.value);
    best = pick_better(best, outcome);

    if !warm_stationary {
        // Random restarts probe for better basins on a reduced iteration
        // budget; a restart that beats the warm result is polished to the
        // full tolerance before comparison.
        let explore = MinimizeOptions {
            max_iters: (cfg.solver.max_iters / 5).max(20),
            ..opts
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed);
        for _ in 0..cfg.solver.random_starts {
            let start: Vec<S> = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.0..=1.0);
                    cfg.i_min + (cfg.i_max - cfg.i_min) * cast(u)
                })
                .collect();
            let mut outcome = minimize_box(&mut objective, &start, &bounds, &explore);
            if outcome.value < best.as_ref().map_or(S::infinity(), |b| b.value) {
                outcome = minimize_box(&mut objective, &outcome.x, &bounds, &opts);
            }
            start_costs.push(outcome.value);
            best = pick_better(best, outcome);
        }
    }

    let best = best.expect("at least one start ran");
    Ok(OcpSolution {
        inputs: best.x,
        cost: best.value,
        converged: best.converged,
        iterations: best.iterations,
        grad_pnorm: best.grad_pnorm,
        start_costs,
    })
}

/// Keep the strictly better outcome; ties keep the earlier (warm) start.
fn pick_better<S: Scalar>(
    best: Option<MinimizeOutcome<S>>,
    candidate: MinimizeOutcome<S>,
) -> Option<MinimizeOutcome<S>> {
    match best {
        None => Some(candidate),
        Some(b) if candidate.value < b.value => Some(candidate),
        Some(b) => Some(b),
    }
}

/// Per-solve diagnostics, recordable by the controller.
#[derive(Debug, Clone, Copy)]
pub struct SolveDiagnostics<S> {
    pub iterations: usize,
    pub grad_pnorm: S,
    pub cost: S,
    pub converged: bool,
}

/// Receding-horizon controller: solves the OCP at the measured state, applies
/// the first input, and keeps the shifted solution as the next warm start.
///
/// A controller instance owns its warm-start state; use one instance per
/// episode.
pub struct MpcController<S> {
    cfg: MpcConfig<S>,
    net: RbfNetwork<S>,
    theta: ThetaVec<S>,
    warm: Option<Vec<S>>,
    diagnostics: Option<Vec<SolveDiagnostics<S>>>,
}

impl<S: Scalar> MpcController<S> {
    pub fn new(cfg: MpcConfig<S>, net: RbfNetwork<S>, theta: ThetaVec<S>) -> Result<Self, MpcError> {
        cfg.validate()?;
        if theta.len() != net.count() {
            return Err(MpcError::Rbf(RbfError::ThetaMismatch {
                theta: theta.len(),
                network: net.count(),
            }));
        }
        Ok(Self {
            cfg,
            net,
            theta,
            warm: None,
            diagnostics: None,
        })
    }

    /// Start recording per-solve diagnostics.
    pub fn record_diagnostics(&mut self) {
        self.diagnostics = Some(Vec::new());
    }

    pub fn diagnostics(&self) -> Option<&[SolveDiagnostics<S>]> {
        self.diagnostics.as_deref()
    }

    /// Drop any warm-start state (fresh episode).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, x_meas: &BatteryState<S>) -> Result<S, MpcError> {
        let sol = solve_ocp(x_meas, &self.theta, &self.cfg, &self.net, self.warm.as_deref())?;
        let mut shifted = sol.inputs[1..].to_vec();
        shifted.push(*sol.inputs.last().expect("horizon >= 1"));
        self.warm = Some(shifted);
        if let Some(diag) = self.diagnostics.as_mut() {
            diag.push(SolveDiagnostics {
                iterations: sol.iterations,
                grad_pnorm: sol.grad_pnorm,
                cost: sol.cost,
                converged: sol.converged,
            });
        }
        Ok(sol.inputs[0])
    }
}

impl<S: Scalar> CurrentController<S> for MpcController<S> {
    fn current(&mut self, x: &BatteryState<S>) -> Result<S, ControllerError> {
        self.solve(x).map_err(|e| ControllerError(e.to_string()))
    }
}
