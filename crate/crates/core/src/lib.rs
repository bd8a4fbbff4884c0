//! Runtime policy repair for learned controllers paired with a model-predictive
//! safety controller.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`types`]: trajectories, trace sets, the dynamics / safety interfaces and
//!   policy rollout machinery.
//! - [`envs`]: the two built-in benchmarks (continuous mountain car and a
//!   kinematic-bicycle roundabout with a traction-loss patch) plus scripted
//!   experts used to train initial policies.
//! - [`policy`]: a small tanh MLP with analytic state/parameter Jacobians and
//!   supervised fitting.
//! - [`trajopt`]: constrained iLQR with exponential constraint penalties and
//!   the pure feasibility mode used by the safety controller.
//! - [`mpsc`]: the model-predictive safety controller (verify, override,
//!   overhead accounting).
//! - [`repair`]: naive policy repair and minimally deviating repair via
//!   trajectory synthesis.
//! - [`analysis`]: empirical verification of the quantitative identities and
//!   the benchmark metric battery.

pub mod analysis;
pub mod csvio;
pub mod diff;
pub mod envs;
pub mod experiment;
pub mod mpsc;
pub mod policy;
pub mod repair;
pub mod seeding;
pub mod trajopt;
pub mod types;

pub use policy::Mlp;
pub use types::{Control, DynamicsModel, SafetyFn, State, TraceSet, Trajectory};
