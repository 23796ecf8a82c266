//! Discrete-time equivalent-circuit battery model.
//!
//! The cell is modeled as an SOC-dependent voltage source in series with an
//! ohmic resistance `R0` and one RC polarization branch (`R1`, `C1`), plus a
//! lumped first-order thermal model. Circuit elements are interpolated from
//! SOC-indexed knot tables with natural cubic splines. The same dynamics serve
//! as the simulated plant and, with deliberately perturbed parameters, as the
//! controller's prediction model.

use crate::scalar::{cast, Scalar};
use crate::spline::{CubicSpline, SplineError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatteryError {
    #[error("{table} table: {source}")]
    BadTable {
        table: &'static str,
        source: SplineError,
    },
    #[error("{table} table must span at least [0, 1], spans [{lo}, {hi}]")]
    TableDoesNotSpanSoc { table: &'static str, lo: f64, hi: f64 },
    #[error("interpolated {table} is non-positive ({value}) at soc {soc}")]
    NonPositiveElement {
        table: &'static str,
        soc: f64,
        value: f64,
    },
    #[error("{name} must be positive, got {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("coulombic efficiency must lie in (0, 1], got {0}")]
    BadEfficiency(f64),
    #[error("mismatch magnitude must lie in [0, 1), got {0}")]
    BadMismatchMagnitude(f64),
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
}

/// Battery state: state of charge `z` (dimensionless), RC-branch voltage `u1`
/// (volts), cell temperature `t` (kelvin).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState<S> {
    pub z: S,
    pub u1: S,
    pub t: S,
}

impl<S: Scalar> BatteryState<S> {
    pub fn new(z: S, u1: S, t: S) -> Self {
        Self { z, u1, t }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.u1.is_finite() && self.t.is_finite()
    }
}

/// Sign convention for the terminal-voltage output map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoltageSign {
    /// `V_T = OCV(z) + u1 + R0 i`: the overpotentials add under positive
    /// (charging) current, so the upper voltage limit tightens as current
    /// grows.
    #[default]
    ChargingConsistent,
    /// `V_T = OCV(z) - u1 - R0 i`, the discharge-oriented convention.
    PaperVerbatim,
}

impl VoltageSign {
    fn factor<S: Scalar>(self) -> S {
        match self {
            VoltageSign::ChargingConsistent => S::one(),
            VoltageSign::PaperVerbatim => -S::one(),
        }
    }
}

/// One SOC-indexed knot table: `value[i]` at `soc[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable<S> {
    pub soc: Vec<S>,
    pub value: Vec<S>,
}

impl<S: Scalar> ParamTable<S> {
    pub fn new(soc: Vec<S>, value: Vec<S>) -> Self {
        Self { soc, value }
    }
}

/// Raw equivalent-circuit parameter set: knot tables for the SOC-dependent
/// elements plus scalar constants.
///
/// Units: ohms (`r0`, `r1`), farads (`c1`), volts (`ocv`), coulombs (`q`),
/// J/K (`c_th`), K/W (`r_th`), kelvin (`t_amb`), seconds (`dt`).
#[derive(Debug, Clone)]
pub struct EcmTables<S> {
    pub r0: ParamTable<S>,
    pub r1: ParamTable<S>,
    pub c1: ParamTable<S>,
    pub ocv: ParamTable<S>,
    pub eta: S,
    pub q: S,
    pub c_th: S,
    pub r_th: S,
    pub t_amb: S,
    pub dt: S,
    pub sign: VoltageSign,
}

/// Validated circuit parameters with prebuilt spline interpolants.
#[derive(Debug, Clone)]
pub struct EcmParams<S> {
    tables: EcmTables<S>,
    r0: CubicSpline<S>,
    r1: CubicSpline<S>,
    c1: CubicSpline<S>,
    ocv: CubicSpline<S>,
}

impl<S: Scalar> EcmParams<S> {
    pub fn new(tables: EcmTables<S>) -> Result<Self, BatteryError> {
        let r0 = build_spline("r0", &tables.r0)?;
        let r1 = build_spline("r1", &tables.r1)?;
        let c1 = build_spline("c1", &tables.c1)?;
        let ocv = build_spline("ocv", &tables.ocv)?;
        for (name, value) in [
            ("q", tables.q),
            ("c_th", tables.c_th),
            ("r_th", tables.r_th),
            ("t_amb", tables.t_amb),
            ("dt", tables.dt),
        ] {
            if !(value > S::zero()) || !value.is_finite() {
                return Err(BatteryError::NonPositiveConstant {
                    name,
                    value: value.as_f64(),
                });
            }
        }
        if !(tables.eta > S::zero() && tables.eta <= S::one()) {
            return Err(BatteryError::BadEfficiency(tables.eta.as_f64()));
        }
        // The element splines must stay positive over the whole SOC range;
        // cubic interpolation of positive knots can still undershoot.
        for (name, sp) in [("r0", &r0), ("r1", &r1), ("c1", &c1)] {
            let grid = 1000;
            for k in 0..=grid {
                let soc = cast(k as f64 / grid as f64);
                let v = sp.eval(soc);
                if !(v > S::zero()) {
                    return Err(BatteryError::NonPositiveElement {
                        table: name,
                        soc: soc.as_f64(),
                        value: v.as_f64(),
                    });
                }
            }
        }
        Ok(Self {
            tables,
            r0,
            r1,
            c1,
            ocv,
        })
    }

    pub fn tables(&self) -> &EcmTables<S> {
        &self.tables
    }

    pub fn dt(&self) -> S {
        self.tables.dt
    }

    pub fn t_amb(&self) -> S {
        self.tables.t_amb
    }

    pub fn sign(&self) -> VoltageSign {
        self.tables.sign
    }

    pub fn r0_at(&self, soc: S) -> S {
        self.r0.eval(soc)
    }

    pub fn r1_at(&self, soc: S) -> S {
        self.r1.eval(soc)
    }

    pub fn c1_at(&self, soc: S) -> S {
        self.c1.eval(soc)
    }

    pub fn ocv_at(&self, soc: S) -> S {
        self.ocv.eval(soc)
    }
}

fn build_spline<S: Scalar>(
    name: &'static str,
    table: &ParamTable<S>,
) -> Result<CubicSpline<S>, BatteryError> {
    let sp = CubicSpline::new(table.soc.clone(), table.value.clone()).map_err(|source| {
        BatteryError::BadTable {
            table: name,
            source,
        }
    })?;
    let (lo, hi) = sp.domain();
    if lo > S::zero() || hi < S::one() {
        return Err(BatteryError::TableDoesNotSpanSoc {
            table: name,
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        });
    }
    Ok(sp)
}

/// Interpolate a knot table at `soc` with a natural cubic spline.
///
/// `soc` outside [0, 1] is clamped with a warning; the tables are only
/// meaningful on the unit interval.
pub fn interp_param<S: Scalar>(table: &ParamTable<S>, soc: S) -> Result<S, BatteryError> {
    if !soc.is_finite() {
        return Err(BatteryError::NonFinite { what: "soc" });
    }
    let sp = CubicSpline::new(table.soc.clone(), table.value.clone()).map_err(|source| {
        BatteryError::BadTable {
            table: "interp",
            source,
        }
    })?;
    let clamped = soc.max(S::zero()).min(S::one());
    if clamped != soc {
        log::warn!(
            "soc {} outside [0, 1]; clamped to {} for table lookup",
            soc,
            clamped
        );
    }
    Ok(sp.eval(clamped))
}

/// One plant step of the discrete ECM dynamics; SOC is clamped to [0, 1].
pub fn step_plant<S: Scalar>(
    x: &BatteryState<S>,
    current: S,
    p: &EcmParams<S>,
) -> Result<BatteryState<S>, BatteryError> {
    if !x.is_finite() {
        return Err(BatteryError::NonFinite { what: "state" });
    }
    if !current.is_finite() {
        return Err(BatteryError::NonFinite { what: "current" });
    }
    let mut next = step_unclamped(x, current, p);
    if next.z < S::zero() || next.z > S::one() {
        log::debug!("soc {} clamped to [0, 1] after plant step", next.z);
        next.z = next.z.max(S::zero()).min(S::one());
    }
    if !next.is_finite() {
        return Err(BatteryError::NonFinite { what: "next state" });
    }
    Ok(next)
}

/// The raw difference equation, without SOC clamping.
///
/// Used for prediction rollouts where a smooth map is needed; table lookups
/// still clamp their SOC argument to the table domain.
pub fn step_unclamped<S: Scalar>(x: &BatteryState<S>, current: S, p: &EcmParams<S>) -> BatteryState<S> {
    let t = &p.tables;
    let r0 = p.r0.eval(x.z);
    let r1 = p.r1.eval(x.z);
    let c1 = p.c1.eval(x.z);
    let z_next = x.z + t.eta * t.dt / t.q * current;
    let decay = (-t.dt / (r1 * c1)).exp();
    let u1_next = (x.u1 - r1 * current) * decay + r1 * current;
    let t_next = x.t
        + t.dt / t.c_th * (current * current * (r0 + r1) - (x.t - t.t_amb) / t.r_th);
    BatteryState::new(z_next, u1_next, t_next)
}

/// Jacobian of [`step_unclamped`]: `a[r][c] = d next[r] / d state[c]` with the
/// state ordered (z, u1, t), and `b[r] = d next[r] / d current`.
#[derive(Debug, Clone, Copy)]
pub struct StepJacobian<S> {
    pub a: [[S; 3]; 3],
    pub b: [S; 3],
}

/// One unclamped step together with its Jacobian.
pub fn step_with_jacobian<S: Scalar>(
    x: &BatteryState<S>,
    current: S,
    p: &EcmParams<S>,
) -> (BatteryState<S>, StepJacobian<S>) {
    let t = &p.tables;
    let (r0, dr0) = p.r0.eval_with_deriv(x.z);
    let (r1, dr1) = p.r1.eval_with_deriv(x.z);
    let (c1, dc1) = p.c1.eval_with_deriv(x.z);
    let z_next = x.z + t.eta * t.dt / t.q * current;
    let tau = r1 * c1;
    let decay = (-t.dt / tau).exp();
    let u1_next = (x.u1 - r1 * current) * decay + r1 * current;
    let t_next = x.t
        + t.dt / t.c_th * (current * current * (r0 + r1) - (x.t - t.t_amb) / t.r_th);

    // d(decay)/dz via the product R1(z) C1(z).
    let dtau = dr1 * c1 + r1 * dc1;
    let ddecay_dz = decay * t.dt / (tau * tau) * dtau;
    let du1_dz = -dr1 * current * decay + (x.u1 - r1 * current) * ddecay_dz + dr1 * current;
    let dt_dz = t.dt / t.c_th * current * current * (dr0 + dr1);

    let jac = StepJacobian {
        a: [
            [S::one(), S::zero(), S::zero()],
            [du1_dz, decay, S::zero()],
            [dt_dz, S::zero(), S::one() - t.dt / (t.c_th * t.r_th)],
        ],
        b: [
            t.eta * t.dt / t.q,
            r1 * (S::one() - decay),
            t.dt / t.c_th * cast(2.0) * current * (r0 + r1),
        ],
    };
    (BatteryState::new(z_next, u1_next, t_next), jac)
}

/// Terminal voltage under the configured sign convention.
pub fn terminal_voltage<S: Scalar>(x: &BatteryState<S>, current: S, p: &EcmParams<S>) -> S {
    let sign: S = p.tables.sign.factor();
    p.ocv.eval(x.z) + sign * (x.u1 + p.r0.eval(x.z) * current)
}

/// Terminal voltage plus its gradient `(d/dz, d/du1, d/dt, d/di)`.
pub fn terminal_voltage_with_grad<S: Scalar>(
    x: &BatteryState<S>,
    current: S,
    p: &EcmParams<S>,
) -> (S, [S; 4]) {
    let sign: S = p.tables.sign.factor();
    let (ocv, docv) = p.ocv.eval_with_deriv(x.z);
    let (r0, dr0) = p.r0.eval_with_deriv(x.z);
    let vt = ocv + sign * (x.u1 + r0 * current);
    (
        vt,
        [docv + sign * dr0 * current, sign, S::zero(), sign * r0],
    )
}

/// Deliberate model-plant mismatch: how strongly the prediction-model
/// parameters are perturbed away from the plant's.
#[derive(Debug, Clone, Copy)]
pub struct MismatchSpec {
    /// Maximum relative perturbation `m`; factors are drawn from `[1-m, 1+m]`.
    pub max_relative_perturbation: f64,
    pub seed: u64,
    pub mode: MismatchMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MismatchMode {
    #[default]
    MultiplicativeUniform,
}

impl MismatchSpec {
    pub fn validate(&self) -> Result<(), BatteryError> {
        let m = self.max_relative_perturbation;
        if !(0.0..1.0).contains(&m) {
            return Err(BatteryError::BadMismatchMagnitude(m));
        }
        Ok(())
    }
}

/// Perturb the impedance, capacity, and thermal parameters with independent
/// multiplicative factors from `[1-m, 1+m]`, deterministically from the seed.
///
/// Perturbed: every `r0`/`r1`/`c1` table ordinate, `q`, `c_th`, `r_th`.
/// Left untouched: the OCV table (directly measurable, and scaling it breaks
/// any voltage-based safety logic), `eta` (bounded above by 1), `t_amb`, and
/// `dt` (operating conditions, not cell parameters). Draw order is fixed:
/// r0 ordinates, r1, c1, then q, c_th, r_th.
pub fn perturb_params<S: Scalar>(
    p: &EcmParams<S>,
    spec: &MismatchSpec,
) -> Result<EcmParams<S>, BatteryError> {
    spec.validate()?;
    let m = spec.max_relative_perturbation;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut factor = |positive: Option<f64>| -> S {
        loop {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            let f = 1.0 + m * u;
            match positive {
                Some(v) if v * f <= 0.0 => continue,
                _ => return cast(f),
            }
        }
    };
    let mut tables = p.tables.clone();
    for table in [&mut tables.r0, &mut tables.r1, &mut tables.c1] {
        for v in table.value.iter_mut() {
            *v = *v * factor(Some(v.as_f64()));
        }
    }
    tables.q = tables.q * factor(Some(tables.q.as_f64()));
    tables.c_th = tables.c_th * factor(Some(tables.c_th.as_f64()));
    tables.r_th = tables.r_th * factor(Some(tables.r_th.as_f64()));
    EcmParams::new(tables)
}

/// A state-feedback charging-current policy.
pub trait CurrentController<S: Scalar> {
    fn current(&mut self, x: &BatteryState<S>) -> Result<S, ControllerError>;
}

#[derive(Debug, Error, Clone)]
#[error("controller failed: {0}")]
pub struct ControllerError(pub String);

impl<S: Scalar, F> CurrentController<S> for F
where
    F: FnMut(&BatteryState<S>) -> Result<S, ControllerError>,
{
    fn current(&mut self, x: &BatteryState<S>) -> Result<S, ControllerError> {
        self(x)
    }
}

/// One recorded sample of a closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryStep<S> {
    pub state: BatteryState<S>,
    /// Current applied at this sample; zero on the final (rest) sample.
    pub current: S,
    pub terminal_voltage: S,
}

/// Closed-loop trajectory over `M` steps: `M + 1` samples on success, fewer
/// when the episode failed. The final sample carries zero current and the
/// corresponding rest voltage.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub steps: Vec<TrajectoryStep<S>>,
    /// Step index at which the controller or plant failed, if any.
    pub failed_at: Option<usize>,
    pub dt: S,
}

impl<S: Scalar> Trajectory<S> {
    pub fn is_failed(&self) -> bool {
        self.failed_at.is_some()
    }

    pub fn states(&self) -> impl Iterator<Item = &BatteryState<S>> {
        self.steps.iter().map(|s| &s.state)
    }
}

/// Run the closed loop for `steps` samples: at each step the controller sees
/// the measured plant state and its current is applied to the plant.
pub fn simulate_episode<S: Scalar, C: CurrentController<S>>(
    controller: &mut C,
    x0: BatteryState<S>,
    steps: usize,
    p_plant: &EcmParams<S>,
) -> Trajectory<S> {
    assert!(steps >= 1, "episode needs at least one step");
    let mut trajectory = Trajectory {
        steps: Vec::with_capacity(steps + 1),
        failed_at: None,
        dt: p_plant.dt(),
    };
    let mut x = x0;
    for k in 0..steps {
        let current = match controller.current(&x) {
            Ok(i) if i.is_finite() => i,
            Ok(_) | Err(_) => {
                trajectory.failed_at = Some(k);
                return trajectory;
            }
        };
        trajectory.steps.push(TrajectoryStep {
            state: x,
            current,
            terminal_voltage: terminal_voltage(&x, current, p_plant),
        });
        x = match step_plant(&x, current, p_plant) {
            Ok(next) => next,
            Err(_) => {
                trajectory.failed_at = Some(k);
                return trajectory;
            }
        };
    }
    trajectory.steps.push(TrajectoryStep {
        state: x,
        current: S::zero(),
        terminal_voltage: terminal_voltage(&x, S::zero(), p_plant),
    });
    trajectory
}
