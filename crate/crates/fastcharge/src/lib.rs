//! Safe closed-loop tuning of a short-horizon charging MPC.
//!
//! The crate simulates lithium-ion fast charging with an equivalent-circuit
//! battery model, controls it with a parameterized soft-constrained MPC, and
//! learns the RBF shaping weights of the MPC stage cost with constrained
//! Bayesian optimization over Gaussian-process surrogates of the closed-loop
//! performance and worst-case constraint slacks.
//!
//! The numerical core is generic over the scalar type ([`Scalar`], `f32` or
//! `f64`); the experiment harness and CLI pin `f64` via the aliases below.

pub mod battery;
pub mod bo;
pub mod gp;
pub mod harness;
pub mod mpc;
pub mod optim;
pub mod rbf;
pub mod sampling;
pub mod scalar;
pub mod spline;

pub use scalar::Scalar;

/// `f64` aliases used by the harness and CLI.
pub type BatteryState64 = battery::BatteryState<f64>;
pub type EcmParams64 = battery::EcmParams<f64>;
pub type EcmTables64 = battery::EcmTables<f64>;
pub type Trajectory64 = battery::Trajectory<f64>;
pub type MpcConfig64 = mpc::MpcConfig<f64>;
pub type RbfNetwork64 = rbf::RbfNetwork<f64>;
pub type ThetaVec64 = rbf::ThetaVec<f64>;
