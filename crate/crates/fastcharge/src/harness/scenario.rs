//! The battery scenario: runs MPC-controlled charging episodes for the BO
//! loop, with seed-derived initial conditions and optional episode-level
//! parallelism.

use super::parallel::parallel_map;
use crate::battery::{simulate_episode, BatteryState, EcmParams};
use crate::bo::{ConstraintSpec, EpisodeOutcome, Scenario};
use crate::mpc::MpcController;
use crate::rbf::{RbfNetwork, ThetaVec};
use crate::sampling::derive_seed;
use crate::{MpcConfig64, RbfNetwork64};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;
use std::time::Instant;

/// One captured episode, kept for artifact export after the loop finishes.
pub struct CapturedEpisode {
    pub iteration: usize,
    pub episode: usize,
    pub outcome: EpisodeOutcome<f64>,
}

pub struct BatteryScenario {
    plant: EcmParams<f64>,
    mpc_cfg: MpcConfig64,
    net: RbfNetwork64,
    constraints: Vec<ConstraintSpec<f64>>,
    steps_m: usize,
    soc0_range: (f64, f64),
    t0_range: (f64, f64),
    seed: u64,
    jobs: usize,
    /// Episode capture log plus per-iteration evaluation wall time.
    captured: Mutex<Vec<CapturedEpisode>>,
    timings: Mutex<Vec<(usize, f64)>>,
    capture: bool,
}

impl BatteryScenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plant: EcmParams<f64>,
        mpc_cfg: MpcConfig64,
        net: RbfNetwork64,
        constraints: Vec<ConstraintSpec<f64>>,
        steps_m: usize,
        soc0_range: (f64, f64),
        t0_range: (f64, f64),
        seed: u64,
        jobs: usize,
    ) -> Self {
        Self {
            plant,
            mpc_cfg,
            net,
            constraints,
            steps_m,
            soc0_range,
            t0_range,
            seed,
            jobs,
            captured: Mutex::new(Vec::new()),
            timings: Mutex::new(Vec::new()),
            capture: true,
        }
    }

    pub fn without_capture(mut self) -> Self {
        self.capture = false;
        self
    }

    /// Initial condition for one episode: a pure function of the scenario
    /// seed, iteration, and episode index, shared across campaign modes.
    pub fn initial_condition(&self, iter: usize, episode: usize) -> BatteryState<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x1C0 + iter as u64, episode as u64));
        let z0 = rng.gen_range(self.soc0_range.0..=self.soc0_range.1);
        let t0 = rng.gen_range(self.t0_range.0..=self.t0_range.1);
        BatteryState::new(z0, 0.0, t0)
    }

    /// One closed-loop episode from the given state with a fresh controller.
    pub fn run_episode(&self, theta: &ThetaVec<f64>, x0: BatteryState<f64>) -> EpisodeOutcome<f64> {
        let mut controller =
            MpcController::new(self.mpc_cfg.clone(), self.net.clone(), theta.clone())
                .expect("validated configuration");
        let trajectory = simulate_episode(&mut controller, x0, self.steps_m, &self.plant);
        EpisodeOutcome {
            trajectory,
            z0: x0.z,
            t0: x0.t,
        }
    }

    pub fn take_captured(&self) -> Vec<CapturedEpisode> {
        std::mem::take(&mut self.captured.lock().expect("capture lock"))
    }

    pub fn take_timings(&self) -> Vec<(usize, f64)> {
        std::mem::take(&mut self.timings.lock().expect("timing lock"))
    }

    pub fn steps_m(&self) -> usize {
        self.steps_m
    }

    pub fn plant(&self) -> &EcmParams<f64> {
        &self.plant
    }

    pub fn network(&self) -> &RbfNetwork<f64> {
        &self.net
    }
}

impl Scenario<f64> for BatteryScenario {
    fn constraints(&self) -> &[ConstraintSpec<f64>] {
        &self.constraints
    }

    fn evaluate(
        &self,
        theta: &ThetaVec<f64>,
        iter: usize,
        n_episodes: usize,
    ) -> Vec<EpisodeOutcome<f64>> {
        let started = Instant::now();
        let ics: Vec<BatteryState<f64>> = (0..n_episodes)
            .map(|ep| self.initial_condition(iter, ep))
            .collect();
        let outcomes = parallel_map(self.jobs, &ics, |x0| self.run_episode(theta, *x0));
        self.timings
            .lock()
            .expect("timing lock")
            .push((iter, started.elapsed().as_secs_f64()));
        if self.capture {
            let mut log = self.captured.lock().expect("capture lock");
            for (ep, outcome) in outcomes.iter().enumerate() {
                log.push(CapturedEpisode {
                    iteration: iter,
                    episode: ep,
                    outcome: outcome.clone(),
                });
            }
        }
        outcomes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{perturb_params, MismatchMode, MismatchSpec};
    use crate::harness::config::tests_support::resolved_default;
    use crate::sampling::derive_seed;

    fn tiny_scenario(jobs: usize) -> BatteryScenario {
        let resolved = resolved_default();
        let plant = resolved.plant_params().unwrap();
        let spec = MismatchSpec {
            max_relative_perturbation: 0.5,
            seed: 7,
            mode: MismatchMode::MultiplicativeUniform,
        };
        let prediction = perturb_params(&plant, &spec).unwrap();
        let mpc_cfg = resolved.mpc_config(prediction, derive_seed(3, 0x50, 0));
        let net = resolved.rbf_network().unwrap();
        BatteryScenario::new(
            plant,
            mpc_cfg,
            net,
            resolved.constraint_specs(),
            20,
            (0.1, 0.5),
            (298.0, 313.0),
            3,
            jobs,
        )
    }

    #[test]
    fn initial_conditions_are_deterministic_and_in_range() {
        let s = tiny_scenario(1);
        for iter in 1..4 {
            for ep in 0..3 {
                let a = s.initial_condition(iter, ep);
                let b = s.initial_condition(iter, ep);
                assert_eq!(a.z.to_bits(), b.z.to_bits());
                assert_eq!(a.t.to_bits(), b.t.to_bits());
                assert!((0.1..=0.5).contains(&a.z));
                assert!((298.0..=313.0).contains(&a.t));
                assert_eq!(a.u1, 0.0);
            }
        }
        // Distinct across iterations and episodes.
        assert_ne!(
            s.initial_condition(1, 0).z.to_bits(),
            s.initial_condition(2, 0).z.to_bits()
        );
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let theta = ThetaVec::zeros(16);
        let seq = tiny_scenario(1);
        let par = tiny_scenario(2);
        let a = seq.evaluate(&theta, 1, 3);
        let b = par.evaluate(&theta, 1, 3);
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.iter().zip(b.iter()) {
            assert_eq!(ea.trajectory.steps.len(), eb.trajectory.steps.len());
            for (sa, sb) in ea.trajectory.steps.iter().zip(eb.trajectory.steps.iter()) {
                assert_eq!(sa.current.to_bits(), sb.current.to_bits());
                assert_eq!(sa.state.z.to_bits(), sb.state.z.to_bits());
            }
        }
    }
}
