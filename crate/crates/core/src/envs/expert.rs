//! Scripted experts supplying demonstration data for the initial policies.

use nalgebra::DVector;

use super::lane_keep::{LaneKeepEnv, ACCEL_MAX, LF, LR, STEER_MAX, TARGET_SPEED};
use crate::types::{Control, State};

/// Energy-pumping bang-bang policy: `u = sign(v)`, pushing right when `v = 0`.
///
/// Deliberately ignores the terminal speed limit, so the cloned policy is
/// unsafe by construction.
pub fn mc_expert(x: &State) -> Control {
    let u = if x[1] < 0.0 { -1.0 } else { 1.0 };
    DVector::from_vec(vec![u])
}

const LOOKAHEAD: f64 = 2.0;
const SPEED_GAIN: f64 = 2.0;

/// Pure-pursuit steering toward a lookahead point on the centerline plus a
/// proportional speed controller toward the target speed.
pub fn lane_expert(env: &LaneKeepEnv, x: &State) -> Control {
    let phi = &env.phi;
    let pos_angle = (x[1] - phi.center.1).atan2(x[0] - phi.center.0);
    // Lookahead point: advance along the centerline by LOOKAHEAD arc length.
    let target_angle = pos_angle + LOOKAHEAD / phi.radius;
    let tx = phi.center.0 + phi.radius * target_angle.cos();
    let ty = phi.center.1 + phi.radius * target_angle.sin();
    let to_target = ((ty - x[1]).atan2(tx - x[0]) - x[2] + std::f64::consts::PI)
        .rem_euclid(std::f64::consts::TAU)
        - std::f64::consts::PI;
    let dist = ((tx - x[0]).powi(2) + (ty - x[1]).powi(2)).sqrt().max(1e-6);
    let delta = ((2.0 * (LF + LR) * to_target.sin()) / dist)
        .atan()
        .clamp(-STEER_MAX, STEER_MAX);
    let a = (SPEED_GAIN * (TARGET_SPEED - x[3])).clamp(-ACCEL_MAX, ACCEL_MAX);
    DVector::from_vec(vec![a, delta])
}
