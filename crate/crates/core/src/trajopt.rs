//! Constrained iLQR: dynamics linearization, LQR backward pass, exponential
//! constraint penalties with multiplier continuation, line search and a trust
//! region; plus the pure feasibility mode used by the safety controller.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::types::{Control, CoreError, DynamicsModel, SafetyFn, State, Trajectory};

/// Per-step quadratic cost about a reference pair:
/// `cost = q0 + q_x . dx + q_u . du + 1/2 [dx; du]^T [[Qxx, Qxu]; [Qxu^T, Quu]] [dx; du]`.
#[derive(Debug, Clone)]
pub struct StageCost {
    pub q0: f64,
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_xu: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
}

impl StageCost {
    pub fn zeros(state_dim: usize, control_dim: usize) -> Self {
        Self {
            q0: 0.0,
            q_x: DVector::zeros(state_dim),
            q_u: DVector::zeros(control_dim),
            q_xx: DMatrix::zeros(state_dim, state_dim),
            q_xu: DMatrix::zeros(state_dim, control_dim),
            q_uu: DMatrix::zeros(control_dim, control_dim),
        }
    }

    pub fn eval(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        self.q0
            + self.q_x.dot(dx)
            + self.q_u.dot(du)
            + 0.5 * (dx.transpose() * &self.q_xx * dx)[0]
            + (dx.transpose() * &self.q_xu * du)[0]
            + 0.5 * (du.transpose() * &self.q_uu * du)[0]
    }
}

/// Time-varying affine feedback `du_t = k_t + K_t dx_t`.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub gains: Vec<(DVector<f64>, DMatrix<f64>)>,
}

/// Exponential-penalty configuration (`sum_t exp(M_t phi(x_t))` with
/// multiplier continuation).
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub initial_weight: f64,
    pub growth: f64,
    pub max_rounds: usize,
    pub tol_phi: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { initial_weight: 10.0, growth: 10.0, max_rounds: 6, tol_phi: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct TrustRegion {
    /// Per-step bound on the state perturbation away from the reference,
    /// measured in the max norm.
    pub delta_x: f64,
    pub shrink: f64,
    pub min_step: f64,
}

impl TrustRegion {
    pub fn new(delta_x: f64) -> Self {
        Self { delta_x, shrink: 0.5, min_step: 1e-4 }
    }

    /// Effectively unconstrained (used by feasibility solves).
    pub fn loose() -> Self {
        Self::new(1e12)
    }
}

/// Standard Jacobians of `f` at `(x, u)`: `dx_{t+1} ~= A dx_t + B du_t`.
pub fn linearize_dynamics(
    dynamics: &dyn DynamicsModel,
    x: &State,
    u: &Control,
) -> (DMatrix<f64>, DMatrix<f64>) {
    dynamics.jacobians(x, u)
}

const EXP_CAP: f64 = 1e30;

/// Second-order (Gauss-Newton) expansion of `exp(weight * phi)` about a
/// nominal state with value `phi_val` and gradient `grad_phi`.
/// Returns the stage-cost increment and whether the exponential saturated.
pub fn penalize(phi_val: f64, grad_phi: &DVector<f64>, weight: f64) -> (StageCost, bool) {
    let n = grad_phi.len();
    let raw = weight * phi_val;
    let overflow = raw > EXP_CAP.ln();
    let p = if overflow { EXP_CAP } else { raw.exp() };
    let mut inc = StageCost::zeros(n, 0);
    inc.q0 = p;
    inc.q_x = weight * p * grad_phi;
    inc.q_xx = (weight * weight * p) * (grad_phi * grad_phi.transpose());
    (inc, overflow)
}

fn penalty_value(phi_val: f64, weight: f64) -> f64 {
    let raw = weight * phi_val;
    if raw > EXP_CAP.ln() {
        EXP_CAP
    } else {
        raw.exp()
    }
}

/// LQR backward pass over stage costs (length N+1) and transition
/// linearizations (length N). Q_uu is regularized Levenberg-style, starting
/// at 1e-6 and growing tenfold until positive definite.
pub fn backward_pass(
    stage: &[StageCost],
    lin: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<FeedbackLaw, CoreError> {
    backward_pass_regularized(stage, lin, 1e-6)
}

/// Backward pass with an explicit starting regularization. The solver raises
/// `mu0` when the line search rejects a full sweep, pulling the update toward
/// a short plain-gradient step.
pub fn backward_pass_regularized(
    stage: &[StageCost],
    lin: &[(DMatrix<f64>, DMatrix<f64>)],
    mu0: f64,
) -> Result<FeedbackLaw, CoreError> {
    assert_eq!(stage.len(), lin.len() + 1);
    let n = stage.len();
    let sdim = stage[0].q_x.len();
    let mut vx = DVector::zeros(sdim);
    let mut vxx = DMatrix::zeros(sdim, sdim);
    let mut gains = vec![None; n];
    for t in (0..n).rev() {
        let s = &stage[t];
        let (qx, qu, qxx, qxu, quu) = if t < lin.len() {
            let (a, b) = &lin[t];
            (
                &s.q_x + a.transpose() * &vx,
                &s.q_u + b.transpose() * &vx,
                &s.q_xx + a.transpose() * &vxx * a,
                &s.q_xu + a.transpose() * &vxx * b,
                &s.q_uu + b.transpose() * &vxx * b,
            )
        } else {
            (s.q_x.clone(), s.q_u.clone(), s.q_xx.clone(), s.q_xu.clone(), s.q_uu.clone())
        };
        let m = qu.len();
        let mut mu = mu0;
        let chol = loop {
            let mut reg = quu.clone();
            for i in 0..m {
                reg[(i, i)] += mu;
            }
            match Cholesky::new(reg) {
                Some(c) => break c,
                None => {
                    mu *= 10.0;
                    if mu > 1e8_f64.max(mu0 * 1e4) {
                        return Err(CoreError::BackwardPassFailed);
                    }
                }
            }
        };
        let k = -chol.solve(&qu);
        let kk = -chol.solve(&qxu.transpose());
        // Value recursion (with the regularized Quu for consistency).
        let quu_reg = {
            let mut r = quu.clone();
            for i in 0..m {
                r[(i, i)] += mu;
            }
            r
        };
        vx = &qx + kk.transpose() * &quu_reg * &k + kk.transpose() * &qu + &qxu * &k;
        vxx = &qxx + kk.transpose() * &quu_reg * &kk + kk.transpose() * qxu.transpose() + &qxu * &kk;
        vxx = (&vxx + vxx.transpose()) * 0.5;
        gains[t] = Some((k, kk));
    }
    Ok(FeedbackLaw { gains: gains.into_iter().map(Option::unwrap).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// `max_t phi(x_t) <= tol_phi`.
    ConstraintsSatisfied,
    /// Constraint tolerance not reached; best low-penalty iterate returned.
    PenaltyMinimized,
}

#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub round: usize,
    pub iterate: usize,
    pub merit: f64,
    pub max_phi: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub trajectory: Trajectory,
    pub feedback: FeedbackLaw,
    pub status: SolveStatus,
    /// Objective part (without penalty) evaluated about the reference.
    pub objective_value: f64,
    /// `max_{t>=1} phi(x_t)` on the returned trajectory.
    pub max_phi: f64,
    pub log: Vec<IterateRecord>,
}

fn objective_value(objective: &[StageCost], reference: &Trajectory, traj: &Trajectory) -> f64 {
    objective
        .iter()
        .zip(reference.steps.iter().zip(traj.steps.iter()))
        .map(|(s, ((xr, ur), (x, u)))| s.eval(&(x - xr), &(u - ur)))
        .sum()
}

fn max_phi_tail(phi: &dyn SafetyFn, traj: &Trajectory) -> f64 {
    traj.steps
        .iter()
        .skip(1)
        .map(|(x, _)| phi.phi(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

struct MeritParts {
    objective: f64,
    penalty: f64,
}

fn merit(
    objective: &[StageCost],
    reference: &Trajectory,
    phi: &dyn SafetyFn,
    weight: f64,
    include_t0: bool,
    traj: &Trajectory,
) -> MeritParts {
    let obj = objective_value(objective, reference, traj);
    let mut pen = 0.0;
    for (t, (x, _)) in traj.steps.iter().enumerate() {
        if t == 0 && !include_t0 {
            continue;
        }
        pen += penalty_value(phi.phi(x), weight);
    }
    MeritParts { objective: obj, penalty: pen }
}

const MAX_INNER_ITERS: usize = 150;

/// Penalty-continuation constrained iLQR about a dynamically consistent
/// nominal trajectory.
///
/// The quadratic `objective` is expressed about the *input* nominal (the
/// reference); dynamics and penalty are re-linearized about the current
/// iterate. The line search only accepts merit-decreasing steps whose state
/// perturbation from the reference stays within the trust region.
#[allow(clippy::too_many_arguments)]
pub fn constrained_ilqr(
    nominal: &Trajectory,
    objective: &[StageCost],
    dynamics: &dyn DynamicsModel,
    phi: &dyn SafetyFn,
    penalty: &PenaltyConfig,
    tr: &TrustRegion,
    pinned_first: Option<&Control>,
) -> Result<IlqrSolution, CoreError> {
    assert_eq!(objective.len(), nominal.steps.len());
    let n = nominal.steps.len() - 1; // horizon
    let sdim = dynamics.state_dim();
    let cdim = dynamics.control_dim();
    // Penalize t = 0 only when the (fixed) initial state is already unsafe,
    // so its constant contribution shows up in the merit.
    let include_t0 = phi.phi(&nominal.steps[0].0) > penalty.tol_phi;

    let mut cur = nominal.clone();
    let mut weight = penalty.initial_weight;
    let mut log = Vec::new();
    let mut last_feedback: Option<FeedbackLaw> = None;
    let mut best_infeasible: Option<(f64, Trajectory, FeedbackLaw)> = None;

    for round in 0..penalty.max_rounds {
        let mut cur_merit = merit(objective, nominal, phi, weight, include_t0, &cur);
        // Levenberg regularization shared across iterates: raised when a full
        // line search fails (the quadratic model overreaches), decayed on
        // accepted steps.
        let mut mu = 1e-6;
        const MU_MAX: f64 = 1e16;
        for iterate in 0..MAX_INNER_ITERS {
            // Combined quadratic model about the current iterate.
            let mut stages = Vec::with_capacity(n + 1);
            let mut lins = Vec::with_capacity(n);
            for (t, ((x, u), (xr, ur))) in
                cur.steps.iter().zip(nominal.steps.iter()).enumerate()
            {
                let dxbar = x - xr;
                let dubar = u - ur;
                let src = &objective[t];
                let mut s = StageCost::zeros(sdim, cdim);
                s.q_x = &src.q_x + &src.q_xx * &dxbar + &src.q_xu * &dubar;
                s.q_u = &src.q_u + src.q_xu.transpose() * &dxbar + &src.q_uu * &dubar;
                s.q_xx = src.q_xx.clone();
                s.q_xu = src.q_xu.clone();
                s.q_uu = src.q_uu.clone();
                if t > 0 || include_t0 {
                    let (inc, _) = penalize(phi.phi(x), &phi.grad_phi(x), weight);
                    s.q_x += inc.q_x;
                    s.q_xx += inc.q_xx;
                }
                stages.push(s);
                if t < n {
                    lins.push(linearize_dynamics(dynamics, x, u));
                }
            }
            // At large continuation weights the penalty curvature can blow
            // up numerically; treat a failed backward pass as the end of
            // this round rather than a hard error.
            let feedback = match backward_pass_regularized(&stages, &lins, mu) {
                Ok(f) => f,
                Err(_) => break,
            };

            // Line search on the true merit.
            let mut alpha = 1.0;
            let mut accepted: Option<(Trajectory, MeritParts, f64)> = None;
            while alpha >= tr.min_step {
                let cand = forward_roll(dynamics, &cur, &feedback, alpha, pinned_first);
                let within_tr = cand
                    .steps
                    .iter()
                    .zip(nominal.steps.iter())
                    .all(|((x, _), (xr, _))| (x - xr).amax() <= tr.delta_x + 1e-12);
                if within_tr {
                    let m = merit(objective, nominal, phi, weight, include_t0, &cand);
                    let total_new = m.objective + m.penalty;
                    let total_old = cur_merit.objective + cur_merit.penalty;
                    if total_new < total_old - 1e-12 * (1.0 + total_old.abs()) {
                        let step_norm = cand
                            .steps
                            .iter()
                            .zip(cur.steps.iter())
                            .map(|((x, _), (xc, _))| (x - xc).amax())
                            .fold(0.0, f64::max);
                        accepted = Some((cand, m, step_norm));
                        break;
                    }
                }
                alpha *= tr.shrink;
            }
            match accepted {
                Some((cand, m, step_norm)) => {
                    cur = cand;
                    cur_merit = m;
                    mu = (mu * 0.25).max(1e-6);
                    last_feedback = Some(feedback);
                    log.push(IterateRecord {
                        round,
                        iterate,
                        merit: cur_merit.objective + cur_merit.penalty,
                        max_phi: max_phi_tail(phi, &cur),
                        step_norm,
                    });
                }
                None => {
                    if last_feedback.is_none() {
                        last_feedback = Some(feedback);
                    }
                    // Heavier regularization tames the model before giving up
                    // on the round.
                    mu = if mu <= 1e-6 { 1.0 } else { mu * 100.0 };
                    if mu > MU_MAX {
                        break;
                    }
                }
            }
        }
        let mphi = max_phi_tail(phi, &cur);
        if mphi <= penalty.tol_phi {
            let feedback =
                last_feedback.unwrap_or_else(|| zero_law(n + 1, sdim, cdim));
            return Ok(IlqrSolution {
                objective_value: objective_value(objective, nominal, &cur),
                max_phi: mphi,
                trajectory: cur,
                feedback,
                status: SolveStatus::ConstraintsSatisfied,
                log,
            });
        }
        let fb = last_feedback.clone().unwrap_or_else(|| zero_law(n + 1, sdim, cdim));
        match &best_infeasible {
            Some((best_phi, _, _)) if *best_phi <= mphi => {}
            _ => best_infeasible = Some((mphi, cur.clone(), fb)),
        }
        weight *= penalty.growth;
    }
    let (mphi, traj, feedback) = best_infeasible.expect("max_rounds >= 1");
    Ok(IlqrSolution {
        objective_value: objective_value(objective, nominal, &traj),
        max_phi: mphi,
        trajectory: traj,
        feedback,
        status: SolveStatus::PenaltyMinimized,
        log,
    })
}

fn zero_law(len: usize, state_dim: usize, control_dim: usize) -> FeedbackLaw {
    FeedbackLaw {
        gains: (0..len)
            .map(|_| (DVector::zeros(control_dim), DMatrix::zeros(control_dim, state_dim)))
            .collect(),
    }
}

fn forward_roll(
    dynamics: &dyn DynamicsModel,
    cur: &Trajectory,
    feedback: &FeedbackLaw,
    alpha: f64,
    pinned_first: Option<&Control>,
) -> Trajectory {
    let n = cur.steps.len() - 1;
    let mut steps = Vec::with_capacity(n + 1);
    let mut x = cur.steps[0].0.clone();
    for t in 0..=n {
        let (k, kk) = &feedback.gains[t];
        let dx = &x - &cur.steps[t].0;
        let u = if t == 0 {
            match pinned_first {
                Some(pin) => pin.clone(),
                None => dynamics.clamp_control(&(&cur.steps[t].1 + alpha * k + kk * &dx)),
            }
        } else {
            dynamics.clamp_control(&(&cur.steps[t].1 + alpha * k + kk * &dx))
        };
        let next = if t < n { Some(dynamics.step(&x, &u)) } else { None };
        steps.push((x.clone(), u));
        if let Some(nx) = next {
            x = nx;
        }
    }
    Trajectory { steps }
}

/// Outcome of a pure feasibility solve.
#[derive(Debug, Clone)]
pub enum Feasibility {
    Feasible(Trajectory),
    Infeasible {
        best: Trajectory,
        max_phi: f64,
    },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }

    pub fn trajectory(&self) -> &Trajectory {
        match self {
            Feasibility::Feasible(t) => t,
            Feasibility::Infeasible { best, .. } => best,
        }
    }
}

/// Zero-objective constrained solve deciding whether a safe control sequence
/// of length `horizon` exists from `x0`. When `pinned_u0` is given the first
/// control is fixed to it. `nominal` seeds the solver (defaults to coasting
/// with zero controls).
pub fn feasibility_solve(
    x0: &State,
    horizon: usize,
    phi: &dyn SafetyFn,
    dynamics: &dyn DynamicsModel,
    pinned_u0: Option<&Control>,
    nominal: Option<Trajectory>,
    penalty: &PenaltyConfig,
) -> Result<Feasibility, CoreError> {
    assert!(horizon >= 1);
    let nominal = match nominal {
        Some(t) => {
            assert_eq!(t.steps.len(), horizon + 1);
            t
        }
        None => {
            let zero = DVector::zeros(dynamics.control_dim());
            let mut steps = Vec::with_capacity(horizon + 1);
            let mut x = x0.clone();
            for t in 0..=horizon {
                let u = if t == 0 {
                    pinned_u0.cloned().unwrap_or_else(|| zero.clone())
                } else {
                    zero.clone()
                };
                let next = if t < horizon { Some(dynamics.step(&x, &u)) } else { None };
                steps.push((x.clone(), u));
                if let Some(nx) = next {
                    x = nx;
                }
            }
            Trajectory { steps }
        }
    };
    // A warm start that already satisfies the constraints (and the pin) is
    // its own certificate.
    let u0_ok = pinned_u0.map_or(true, |u| nominal.steps[0].1 == *u);
    if u0_ok && max_phi_tail(phi, &nominal) <= penalty.tol_phi {
        return Ok(Feasibility::Feasible(nominal));
    }
    let objective =
        vec![StageCost::zeros(dynamics.state_dim(), dynamics.control_dim()); horizon + 1];
    let sol = constrained_ilqr(
        &nominal,
        &objective,
        dynamics,
        phi,
        penalty,
        &TrustRegion::loose(),
        pinned_u0,
    )?;
    if sol.status == SolveStatus::ConstraintsSatisfied {
        Ok(Feasibility::Feasible(sol.trajectory))
    } else {
        Ok(Feasibility::Infeasible { best: sol.trajectory, max_phi: sol.max_phi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct LinearSystem {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    }

    impl DynamicsModel for LinearSystem {
        fn state_dim(&self) -> usize {
            self.a.nrows()
        }
        fn control_dim(&self) -> usize {
            self.b.ncols()
        }
        fn step(&self, x: &State, u: &Control) -> State {
            &self.a * x + &self.b * u
        }
        fn control_bounds(&self) -> (Control, Control) {
            let m = self.control_dim();
            (
                DVector::from_element(m, -1e9),
                DVector::from_element(m, 1e9),
            )
        }
    }

    struct NeverUnsafe;
    impl SafetyFn for NeverUnsafe {
        fn phi(&self, _x: &State) -> f64 {
            -1.0
        }
        fn grad_phi(&self, x: &State) -> DVector<f64> {
            DVector::zeros(x.len())
        }
    }

    #[test]
    fn linearize_exact_on_linear_system() {
        let sys = LinearSystem {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[0.1, 1.0]),
        };
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let u = DVector::from_vec(vec![0.7]);
        let (a, b) = linearize_dynamics(&sys, &x, &u);
        assert!((a - &sys.a).amax() < 1e-7);
        assert!((b - &sys.b).amax() < 1e-7);
    }

    #[test]
    fn richardson_prediction_error() {
        // Quadratic dynamics: halving the perturbation should reduce the
        // linearization error by ~4x.
        struct Quad;
        impl DynamicsModel for Quad {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn step(&self, x: &State, u: &Control) -> State {
                DVector::from_vec(vec![x[0] + x[0] * x[0] + u[0] + 0.5 * u[0] * u[0]])
            }
            fn control_bounds(&self) -> (Control, Control) {
                (DVector::from_vec(vec![-1e9]), DVector::from_vec(vec![1e9]))
            }
        }
        let sys = Quad;
        let x = DVector::from_vec(vec![0.3]);
        let u = DVector::from_vec(vec![-0.2]);
        let (a, b) = linearize_dynamics(&sys, &x, &u);
        let err = |scale: f64| {
            let dx = DVector::from_vec(vec![0.01 * scale]);
            let du = DVector::from_vec(vec![0.02 * scale]);
            let truth = sys.step(&(&x + &dx), &(&u + &du));
            let lin = sys.step(&x, &u) + &a * dx + &b * du;
            (truth - lin).amax()
        };
        assert!(err(1.0) / err(0.5) >= 3.9);
    }

    #[test]
    fn backward_pass_scalar_hand_riccati() {
        // One control step, terminal quadratic state cost: K_0 = -1/2.
        let mut s0 = StageCost::zeros(1, 1);
        s0.q_uu = DMatrix::from_element(1, 1, 1.0);
        let mut s1 = StageCost::zeros(1, 1);
        s1.q_xx = DMatrix::from_element(1, 1, 1.0);
        let lin = vec![(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0))];
        let law = backward_pass(&[s0, s1], &lin).unwrap();
        assert_relative_eq!(law.gains[0].1[(0, 0)], -0.5, epsilon = 1e-5);
        assert_relative_eq!(law.gains[0].0[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_pass_zero_linear_terms_zero_feedforward() {
        let mut rng_state = 123u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let horizon = 20;
        let mut stages = Vec::new();
        let mut lins = Vec::new();
        for t in 0..=horizon {
            let mut s = StageCost::zeros(2, 1);
            // Random PD-ish stage costs, zero linear terms.
            let d0 = 1.0 + next().abs();
            let d1 = 1.0 + next().abs();
            s.q_xx = DMatrix::from_diagonal(&DVector::from_vec(vec![d0, d1]));
            s.q_uu = DMatrix::from_element(1, 1, 1.0 + next().abs());
            stages.push(s);
            if t < horizon {
                lins.push((
                    DMatrix::from_row_slice(2, 2, &[1.0, 0.1 * next(), 0.1 * next(), 1.0]),
                    DMatrix::from_row_slice(2, 1, &[0.1 * next(), 1.0]),
                ));
            }
        }
        let law = backward_pass(&stages, &lins).unwrap();
        for (k, kk) in &law.gains {
            assert!(k.amax() < 1e-12, "feedforward must vanish");
            assert!(kk.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn penalize_values() {
        let g = DVector::from_vec(vec![1.0, 0.0]);
        // Deep safe: increment ~ 0.
        let (inc, of) = penalize(-10.0, &g, 10.0);
        assert!(!of);
        assert!(inc.q0 < 1e-40 && inc.q_x.amax() < 1e-40);
        // At the boundary with M = 10.
        let (inc, of) = penalize(0.0, &g, 10.0);
        assert!(!of);
        assert_relative_eq!(inc.q_x[0], 10.0);
        assert_relative_eq!(inc.q_xx[(0, 0)], 100.0);
        assert_relative_eq!(inc.q_xx[(1, 1)], 0.0);
        // Doubling M doubles the gradient at phi = 0.
        let (inc2, _) = penalize(0.0, &g, 20.0);
        assert_relative_eq!(inc2.q_x[0], 2.0 * inc.q_x[0]);
        // Overflow saturates and flags.
        let (inc3, of3) = penalize(100.0, &g, 10.0);
        assert!(of3);
        assert_eq!(inc3.q0, 1e30);
    }

    #[test]
    fn stationary_nominal_returned_unchanged() {
        let sys = LinearSystem {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        // Zero-gradient objective (pure quadratic about the nominal),
        // nominal already safe.
        let horizon = 5;
        let mut steps = Vec::new();
        let x0 = DVector::from_vec(vec![0.0]);
        let mut x = x0.clone();
        for t in 0..=horizon {
            let u = DVector::from_vec(vec![0.0]);
            let nx = sys.step(&x, &u);
            steps.push((x.clone(), u));
            if t < horizon {
                x = nx;
            }
        }
        let nominal = Trajectory { steps };
        let mut objective = Vec::new();
        for _ in 0..=horizon {
            let mut s = StageCost::zeros(1, 1);
            s.q_xx = DMatrix::from_element(1, 1, 1.0);
            s.q_uu = DMatrix::from_element(1, 1, 1.0);
            objective.push(s);
        }
        let sol = constrained_ilqr(
            &nominal,
            &objective,
            &sys,
            &NeverUnsafe,
            &PenaltyConfig::default(),
            &TrustRegion::new(1.0),
            None,
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::ConstraintsSatisfied);
        assert_eq!(sol.trajectory, nominal);
    }

    #[test]
    fn merit_non_increasing_within_round() {
        // Drive a 1-D integrator toward a constraint and check the logged
        // merit sequence.
        struct Band;
        impl SafetyFn for Band {
            fn phi(&self, x: &State) -> f64 {
                x[0] - 1.0
            }
            fn grad_phi(&self, _x: &State) -> DVector<f64> {
                DVector::from_vec(vec![1.0])
            }
        }
        let sys = LinearSystem {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        // Nominal races past the constraint: x_t = t * 0.5.
        let horizon = 6;
        let mut steps = Vec::new();
        let mut x = DVector::from_vec(vec![0.0]);
        for t in 0..=horizon {
            let u = DVector::from_vec(vec![0.5]);
            let nx = sys.step(&x, &u);
            steps.push((x.clone(), u));
            if t < horizon {
                x = nx;
            }
        }
        let nominal = Trajectory { steps };
        let objective = vec![StageCost::zeros(1, 1); horizon + 1];
        let sol = constrained_ilqr(
            &nominal,
            &objective,
            &sys,
            &Band,
            &PenaltyConfig::default(),
            &TrustRegion::loose(),
            None,
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::ConstraintsSatisfied);
        for w in sol.log.windows(2) {
            if w[0].round == w[1].round {
                assert!(w[1].merit <= w[0].merit + 1e-9, "merit increased within a round");
            }
        }
    }

    #[test]
    fn pinned_first_control_is_exact() {
        struct Band;
        impl SafetyFn for Band {
            fn phi(&self, x: &State) -> f64 {
                x[0] - 1.0
            }
        }
        let sys = LinearSystem {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        let pin = DVector::from_vec(vec![0.25]);
        let out = feasibility_solve(
            &DVector::from_vec(vec![0.0]),
            5,
            &Band,
            &sys,
            Some(&pin),
            None,
            &PenaltyConfig::default(),
        )
        .unwrap();
        assert_eq!(out.trajectory().steps[0].1, pin);
        assert!(out.is_feasible());
    }

    #[test]
    fn feasible_deep_safe_trivial() {
        let sys = LinearSystem {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        let out = feasibility_solve(
            &DVector::from_vec(vec![0.0]),
            8,
            &NeverUnsafe,
            &sys,
            None,
            None,
            &PenaltyConfig::default(),
        )
        .unwrap();
        assert!(out.is_feasible());
        assert!(out.trajectory().dynamics_residual(&sys) < 1e-12);
    }
}
