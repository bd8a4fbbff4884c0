//! Shared fixtures for the criterion benchmarks.

use nalgebra::DVector;
use policy_repair_core::envs::{Environment, LaneKeepEnv, MountainCarEnv};
use policy_repair_core::policy::Mlp;
use policy_repair_core::types::State;

pub fn mc_env() -> MountainCarEnv {
    MountainCarEnv::default()
}

pub fn lane_env() -> LaneKeepEnv {
    LaneKeepEnv::default()
}

/// A randomly initialized policy with the lane benchmark's architecture.
pub fn lane_policy() -> Mlp {
    let env = lane_env();
    let (lo, hi) = env.dynamics().control_bounds();
    Mlp::random(&[4, 32, 32, 2], 7).with_clamp(lo, hi)
}

/// A mid-ring lane state at cruise speed.
pub fn lane_state() -> State {
    let ang: f64 = 0.3;
    DVector::from_vec(vec![8.0 * ang.cos(), 8.0 * ang.sin(), ang + std::f64::consts::FRAC_PI_2, 8.0])
}

/// A mountain-car state on the approach slope.
pub fn mc_state() -> State {
    DVector::from_vec(vec![-0.5, 0.03])
}
