//! Charging-time metric and the initial-condition reduction map: how much
//! faster the learned controller reaches the target SOC than the unshaped
//! one, cell by cell over a grid of initial states.

use super::parallel::parallel_map;
use super::scenario::BatteryScenario;
use crate::battery::{BatteryState, Trajectory};
use crate::rbf::ThetaVec;
use crate::scalar::Scalar;

/// Seconds until the trajectory first reaches the target SOC, or `None` when
/// it never does.
pub fn charging_time<S: Scalar>(trajectory: &Trajectory<S>, target_soc: S) -> Option<S> {
    trajectory
        .steps
        .iter()
        .position(|s| s.state.z >= target_soc)
        .map(|k| trajectory.dt * S::from(k).expect("step index fits the scalar"))
}

/// One grid cell of the reduction map.
#[derive(Debug, Clone)]
pub struct ReductionCell {
    pub soc0: f64,
    pub t0: f64,
    pub baseline_s: Option<f64>,
    pub learned_s: Option<f64>,
}

impl ReductionCell {
    /// Baseline minus learned time; positive means the learned weights charge
    /// faster. Only defined when both runs reached the target.
    pub fn reduction_s(&self) -> Option<f64> {
        match (self.baseline_s, self.learned_s) {
            (Some(b), Some(l)) => Some(b - l),
            _ => None,
        }
    }

    pub fn status(&self) -> &'static str {
        match (self.baseline_s, self.learned_s) {
            (Some(_), Some(_)) => "ok",
            (None, Some(_)) => "base_not_reached",
            (Some(_), None) => "learned_not_reached",
            (None, None) => "both_not_reached",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReductionMap {
    pub cells: Vec<ReductionCell>,
    pub target_soc: f64,
}

impl ReductionMap {
    /// Mean reduction over the cells where both runs reached the target.
    pub fn mean_reduction_s(&self) -> Option<f64> {
        let ok: Vec<f64> = self.cells.iter().filter_map(ReductionCell::reduction_s).collect();
        if ok.is_empty() {
            None
        } else {
            Some(ok.iter().sum::<f64>() / ok.len() as f64)
        }
    }
}

/// Simulate every grid cell once with the zero weights and once with the
/// learned weights, from identical initial conditions against the same plant.
pub fn build_reduction_map(
    scenario: &BatteryScenario,
    grid: &[(f64, f64)],
    theta_learned: &ThetaVec<f64>,
    target_soc: f64,
    jobs: usize,
) -> ReductionMap {
    let zero = ThetaVec::zeros(theta_learned.len());
    let cells = parallel_map(jobs, grid, |&(soc0, t0)| {
        let x0 = BatteryState::new(soc0, 0.0, t0);
        let base = scenario.run_episode(&zero, x0);
        let learned = scenario.run_episode(theta_learned, x0);
        ReductionCell {
            soc0,
            t0,
            baseline_s: charging_time(&base.trajectory, target_soc),
            learned_s: charging_time(&learned.trajectory, target_soc),
        }
    });
    ReductionMap {
        cells,
        target_soc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::TrajectoryStep;

    fn traj(zs: &[f64], dt: f64) -> Trajectory<f64> {
        Trajectory {
            steps: zs
                .iter()
                .map(|&z| TrajectoryStep {
                    state: BatteryState::new(z, 0.0, 300.0),
                    current: 0.0,
                    terminal_voltage: 3.7,
                })
                .collect(),
            failed_at: None,
            dt,
        }
    }

    #[test]
    fn already_charged_is_zero_seconds() {
        let t = traj(&[0.85, 0.9], 10.0);
        assert_eq!(charging_time(&t, 0.8), Some(0.0));
    }

    #[test]
    fn closed_form_constant_current_case() {
        // z_k = 0.5 + k/120 with dt = 10 s and 6 A on a 7200 C cell: first
        // k with z >= 0.8 is 36, so 360 s.
        let zs: Vec<f64> = (0..=60).map(|k| 0.5 + k as f64 * (6.0 * 10.0 / 7200.0)).collect();
        let t = traj(&zs, 10.0);
        assert_eq!(charging_time(&t, 0.8), Some(360.0));
    }

    #[test]
    fn never_reached_is_none() {
        let t = traj(&[0.3; 20], 10.0);
        assert_eq!(charging_time(&t, 0.8), None);
    }

    #[test]
    fn cell_status_and_reduction() {
        let cell = ReductionCell {
            soc0: 0.1,
            t0: 300.0,
            baseline_s: Some(1500.0),
            learned_s: Some(1200.0),
        };
        assert_eq!(cell.reduction_s(), Some(300.0));
        assert_eq!(cell.status(), "ok");
        let cell = ReductionCell {
            soc0: 0.1,
            t0: 300.0,
            baseline_s: Some(1500.0),
            learned_s: None,
        };
        assert_eq!(cell.reduction_s(), None);
        assert_eq!(cell.status(), "learned_not_reached");
    }
}
