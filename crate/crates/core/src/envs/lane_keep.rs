//! Kinematic-bicycle lane keeping on a circular lane, with an optional
//! traction-loss sector in which friction drops to zero (the car coasts
//! straight and cannot accelerate or brake).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Environment;
use crate::types::{Control, DynamicsModel, SafetyFn, State};

pub const DT: f64 = 0.03;
pub const LF: f64 = 1.5;
pub const LR: f64 = 1.5;
pub const STEER_MAX: f64 = 0.9;
pub const ACCEL_MAX: f64 = 4.0;
pub const TARGET_SPEED: f64 = 8.0;

/// State is `[x, y, psi, v]` (m, m, rad unwrapped, m/s); control is
/// `[a, delta]` (m/s^2, rad).
#[derive(Debug, Clone)]
pub struct LaneKeepEnv {
    pub phi: LanePhi,
    /// Traction-loss sector `[start, end]` in ring angle, radians in `[0, 2pi)`.
    pub patch: Option<(f64, f64)>,
    /// Episode finishes once the ring angle passes this value.
    pub finish_angle: f64,
    pub start_angle: f64,
    pub episode_cap: usize,
    pub sc_horizon: usize,
}

impl Default for LaneKeepEnv {
    fn default() -> Self {
        Self {
            phi: LanePhi::default(),
            patch: Some((50f64.to_radians(), 83f64.to_radians())),
            finish_angle: 290f64.to_radians(),
            start_angle: 0.05,
            episode_cap: 600,
            sc_horizon: 30,
        }
    }
}

impl LaneKeepEnv {
    pub fn without_traction_loss(mut self) -> Self {
        self.patch = None;
        self
    }

    pub fn radius(&self) -> f64 {
        self.phi.radius
    }

    /// Ring angle of the position, in `[0, 2pi)`.
    pub fn ring_angle(&self, x: &State) -> f64 {
        let a = (x[1] - self.phi.center.1).atan2(x[0] - self.phi.center.0);
        if a < 0.0 {
            a + std::f64::consts::TAU
        } else {
            a
        }
    }

    pub fn in_patch(&self, x: &State) -> bool {
        match self.patch {
            Some((lo, hi)) => {
                let a = self.ring_angle(x);
                a >= lo && a <= hi
            }
            None => false,
        }
    }

    /// Centerline as a polyline (for plotting).
    pub fn centerline(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (
                    self.phi.center.0 + self.phi.radius * a.cos(),
                    self.phi.center.1 + self.phi.radius * a.sin(),
                )
            })
            .collect()
    }
}

impl DynamicsModel for LaneKeepEnv {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &State, u: &Control) -> State {
        let (px, py, psi, v) = (x[0], x[1], x[2], x[3]);
        let patch = self.in_patch(x);
        let (a, delta) = if patch {
            (0.0, 0.0)
        } else {
            (u[0].clamp(-ACCEL_MAX, ACCEL_MAX), u[1].clamp(-STEER_MAX, STEER_MAX))
        };
        let beta = (LR / (LF + LR) * delta.tan()).atan();
        let nx = px + v * (psi + beta).cos() * DT;
        let ny = py + v * (psi + beta).sin() * DT;
        let npsi = psi + v / LR * beta.sin() * DT;
        let nv = (v + a * DT).max(0.0);
        DVector::from_vec(vec![nx, ny, npsi, nv])
    }

    fn control_bounds(&self) -> (Control, Control) {
        (
            DVector::from_vec(vec![-ACCEL_MAX, -STEER_MAX]),
            DVector::from_vec(vec![ACCEL_MAX, STEER_MAX]),
        )
    }

    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let (psi, v) = (x[2], x[3]);
        let patch = self.in_patch(x);
        let (a_ctrl, delta) = if patch {
            (0.0, 0.0)
        } else {
            (u[0].clamp(-ACCEL_MAX, ACCEL_MAX), u[1].clamp(-STEER_MAX, STEER_MAX))
        };
        let k = LR / (LF + LR);
        let beta = (k * delta.tan()).atan();
        let (sin_pb, cos_pb) = (psi + beta).sin_cos();
        let (sin_b, cos_b) = beta.sin_cos();
        let dv_alive = if v + a_ctrl * DT > 0.0 { 1.0 } else { 0.0 };

        let mut jac_a = DMatrix::identity(4, 4);
        jac_a[(0, 2)] = -v * sin_pb * DT;
        jac_a[(0, 3)] = cos_pb * DT;
        jac_a[(1, 2)] = v * cos_pb * DT;
        jac_a[(1, 3)] = sin_pb * DT;
        jac_a[(2, 3)] = sin_b / LR * DT;
        jac_a[(3, 3)] = dv_alive;

        let mut jac_b = DMatrix::zeros(4, 2);
        if !patch {
            let sec2 = 1.0 / delta.cos().powi(2);
            let dbeta_ddelta = k * sec2 / (1.0 + (k * delta.tan()).powi(2));
            jac_b[(0, 1)] = -v * sin_pb * dbeta_ddelta * DT;
            jac_b[(1, 1)] = v * cos_pb * dbeta_ddelta * DT;
            jac_b[(2, 1)] = v / LR * cos_b * dbeta_ddelta * DT;
            jac_b[(3, 0)] = dv_alive * DT;
        }
        (jac_a, jac_b)
    }
}

impl Environment for LaneKeepEnv {
    fn name(&self) -> &'static str {
        "lane_keep"
    }
    fn dynamics(&self) -> &dyn DynamicsModel {
        self
    }
    fn phi(&self) -> &dyn SafetyFn {
        &self.phi
    }
    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> State {
        let angle = self.start_angle + rng.gen_range(-0.02..0.02);
        let radial = rng.gen_range(-0.2..0.2);
        let heading_off = rng.gen_range(-0.03..0.03);
        let v = rng.gen_range(7.5..8.0);
        let r = self.phi.radius + radial;
        DVector::from_vec(vec![
            self.phi.center.0 + r * angle.cos(),
            self.phi.center.1 + r * angle.sin(),
            angle + std::f64::consts::FRAC_PI_2 + heading_off,
            v,
        ])
    }
    fn is_terminal(&self, x: &State) -> bool {
        let a = self.ring_angle(x);
        a >= self.finish_angle && a < std::f64::consts::TAU - 0.1
    }
    fn episode_cap(&self) -> usize {
        self.episode_cap
    }
    fn sc_horizon(&self) -> usize {
        self.sc_horizon
    }
    fn sc_margin(&self) -> f64 {
        // Keeps accepted plans a tenth of the lane half-width away from the
        // boundary so the margin survives the receding-horizon shift.
        0.1
    }
    fn expert(&self, x: &State) -> Control {
        super::lane_expert(self, x)
    }
}

/// `phi(x) = | ||(x, y) - center|| - radius | - width / 2`.
#[derive(Debug, Clone)]
pub struct LanePhi {
    pub center: (f64, f64),
    pub radius: f64,
    pub half_width: f64,
}

impl Default for LanePhi {
    fn default() -> Self {
        Self { center: (0.0, 0.0), radius: 8.0, half_width: 0.9 }
    }
}

impl LanePhi {
    /// Signed radial error `||pos - center|| - radius`.
    pub fn radial_error(&self, x: &State) -> f64 {
        let dx = x[0] - self.center.0;
        let dy = x[1] - self.center.1;
        (dx * dx + dy * dy).sqrt() - self.radius
    }
}

impl SafetyFn for LanePhi {
    fn phi(&self, x: &State) -> f64 {
        self.radial_error(x).abs() - self.half_width
    }

    fn grad_phi(&self, x: &State) -> DVector<f64> {
        let dx = x[0] - self.center.0;
        let dy = x[1] - self.center.1;
        let r = (dx * dx + dy * dy).sqrt().max(1e-9);
        let s = (r - self.radius).signum();
        let mut g = DVector::zeros(x.len());
        g[0] = s * dx / r;
        g[1] = s * dy / r;
        g
    }
}
