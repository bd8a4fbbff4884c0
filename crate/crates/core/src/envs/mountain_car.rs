//! Continuous mountain car with the classic simulator constants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Environment;
use crate::types::{Control, DynamicsModel, SafetyFn, State};

pub const POS_MIN: f64 = -1.2;
pub const POS_MAX: f64 = 0.6;
pub const VEL_MAX: f64 = 0.07;
pub const FORCE_GAIN: f64 = 0.0015;
pub const GRAVITY_GAIN: f64 = 0.0025;
pub const GOAL_POS: f64 = 0.45;
pub const SAFE_SPEED: f64 = 0.02;

/// State is `[p, v]`, control is the scalar force in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct MountainCarEnv {
    pub phi: MountainCarPhi,
    pub episode_cap: usize,
    pub sc_horizon: usize,
    /// Initial positions are drawn uniformly from this interval, v = 0.
    pub init_pos: (f64, f64),
}

impl Default for MountainCarEnv {
    fn default() -> Self {
        Self {
            phi: MountainCarPhi::default(),
            episode_cap: 300,
            sc_horizon: 20,
            init_pos: (-0.6, -0.4),
        }
    }
}

impl DynamicsModel for MountainCarEnv {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &State, u: &Control) -> State {
        let (p, v) = (x[0], x[1]);
        let f = u[0].clamp(-1.0, 1.0);
        let mut v_next = (v + FORCE_GAIN * f - GRAVITY_GAIN * (3.0 * p).cos())
            .clamp(-VEL_MAX, VEL_MAX);
        let mut p_next = (p + v_next).clamp(POS_MIN, POS_MAX);
        if p_next <= POS_MIN {
            p_next = POS_MIN;
            v_next = 0.0;
        }
        DVector::from_vec(vec![p_next, v_next])
    }

    fn control_bounds(&self) -> (Control, Control) {
        (DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0]))
    }

    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, v) = (x[0], x[1]);
        let f = u[0].clamp(-1.0, 1.0);
        let v_raw = v + FORCE_GAIN * f - GRAVITY_GAIN * (3.0 * p).cos();
        let v_clamped = v_raw.abs() >= VEL_MAX;
        let p_raw = p + v_raw.clamp(-VEL_MAX, VEL_MAX);
        let p_clamped = p_raw <= POS_MIN || p_raw >= POS_MAX;

        // dv'/dp on the unclamped branch.
        let dv_dp = if v_clamped { 0.0 } else { 3.0 * GRAVITY_GAIN * (3.0 * p).sin() };
        let dv_dv = if v_clamped { 0.0 } else { 1.0 };
        let dv_du = if v_clamped { 0.0 } else { FORCE_GAIN };
        let (dp_dp, dp_dv, dp_du) = if p_clamped {
            (0.0, 0.0, 0.0)
        } else {
            (1.0 + dv_dp, dv_dv, dv_du)
        };
        // Left-wall velocity reset is treated as a (measure-zero) kink; the
        // Jacobian uses the pre-reset branch.
        let a = DMatrix::from_row_slice(2, 2, &[dp_dp, dp_dv, dv_dp, dv_dv]);
        let b = DMatrix::from_row_slice(2, 1, &[dp_du, dv_du]);
        (a, b)
    }
}

impl Environment for MountainCarEnv {
    fn name(&self) -> &'static str {
        "mountain_car"
    }
    fn dynamics(&self) -> &dyn DynamicsModel {
        self
    }
    fn phi(&self) -> &dyn SafetyFn {
        &self.phi
    }
    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> State {
        let p = rng.gen_range(self.init_pos.0..=self.init_pos.1);
        DVector::from_vec(vec![p, 0.0])
    }
    fn is_terminal(&self, x: &State) -> bool {
        x[0] >= GOAL_POS
    }
    fn episode_cap(&self) -> usize {
        self.episode_cap
    }
    fn sc_horizon(&self) -> usize {
        self.sc_horizon
    }
    fn expert(&self, x: &State) -> Control {
        super::mc_expert(x)
    }
}

/// Smooth unsafe-region indicator: `phi(x) = g_k(p - 0.45) * (v - 0.02)` with
/// a logistic gate `g_k(s) = 1 / (1 + exp(-k s))`.
#[derive(Debug, Clone)]
pub struct MountainCarPhi {
    pub steepness: f64,
}

impl Default for MountainCarPhi {
    fn default() -> Self {
        Self { steepness: 200.0 }
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl SafetyFn for MountainCarPhi {
    fn phi(&self, x: &State) -> f64 {
        let gate = logistic(self.steepness * (x[0] - GOAL_POS));
        gate * (x[1] - SAFE_SPEED)
    }

    fn grad_phi(&self, x: &State) -> DVector<f64> {
        let gate = logistic(self.steepness * (x[0] - GOAL_POS));
        let dgate = self.steepness * gate * (1.0 - gate);
        DVector::from_vec(vec![dgate * (x[1] - SAFE_SPEED), gate])
    }
}
