//! Shared numeric types, the dynamics/safety interfaces and rollout machinery.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::diff;

/// System state. Dimension is fixed per environment.
pub type State = DVector<f64>;
/// Control action, bounded componentwise by environment limits.
pub type Control = DVector<f64>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("rollout produced a non-finite state at step {step}")]
    FailedRollout { step: usize },
    #[error("policy parameters are not finite")]
    InvalidParameters,
    #[error("fit diverged (loss became non-finite)")]
    FitDiverged,
    #[error("backward pass failed: Q_uu indefinite after max regularization")]
    BackwardPassFailed,
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad policy file: {0}")]
    BadPolicyFile(String),
}

/// Deterministic discrete-time dynamical model `x_{t+1} = f(x_t, u_t)`.
///
/// `jacobians` returns the standard Jacobians `(A, B)` with
/// `A[i][j] = d f_i / d x_j` and `B[i][j] = d f_i / d u_j`, so that
/// `dx_{t+1} ~= A dx_t + B du_t`. Implementations may rely on the
/// finite-difference fallback.
pub trait DynamicsModel: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &State, u: &Control) -> State;

    /// Componentwise control box (lower, upper).
    fn control_bounds(&self) -> (Control, Control);

    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = diff::jacobian_fd(|z| self.step(z, u), x, 1e-5);
        let b = diff::jacobian_fd(|z| self.step(x, z), u, 1e-5);
        (a, b)
    }

    fn clamp_control(&self, u: &Control) -> Control {
        let (lo, hi) = self.control_bounds();
        Control::from_iterator(
            u.len(),
            u.iter()
                .zip(lo.iter().zip(hi.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }
}

/// Differentiable scalar safety function; `phi(x) <= 0` means `x` is safe.
pub trait SafetyFn: Sync {
    fn phi(&self, x: &State) -> f64;
    fn grad_phi(&self, x: &State) -> DVector<f64> {
        diff::gradient_fd(|z| self.phi(z), x, 1e-6)
    }
}

/// Safety specification checked over a finite horizon.
pub struct SafetySpec<'a> {
    pub phi: &'a dyn SafetyFn,
    pub horizon: usize,
    pub tol_phi: f64,
}

/// Ordered (state, control) pairs over a finite horizon.
///
/// A trajectory with horizon `H` stores `H + 1` pairs; the final control is
/// the recorded action at the terminal state and is not consumed by the
/// dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(State, Control)>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.steps.iter().map(|(x, _)| x)
    }

    pub fn controls(&self) -> impl Iterator<Item = &Control> {
        self.steps.iter().map(|(_, u)| u)
    }

    /// Max dynamics residual `max_t ||x_{t+1} - f(x_t, u_t)||_inf`.
    pub fn dynamics_residual(&self, dynamics: &dyn DynamicsModel) -> f64 {
        self.steps
            .windows(2)
            .map(|w| {
                let pred = dynamics.step(&w[0].0, &w[0].1);
                (&w[1].0 - pred).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// One SC-paired run: a trajectory plus per-step intervention bookkeeping.
///
/// `flags.len()` equals the trajectory's control count; `substitutes[t]` is
/// `Some` iff `flags[t]` is set.
#[derive(Debug, Clone)]
pub struct TracedRun {
    pub trajectory: Trajectory,
    pub flags: Vec<bool>,
    pub substitutes: Vec<Option<Control>>,
}

impl TracedRun {
    pub fn intervention_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn coherent(&self) -> bool {
        self.flags.len() == self.trajectory.steps.len()
            && self.substitutes.len() == self.flags.len()
            && self
                .flags
                .iter()
                .zip(&self.substitutes)
                .all(|(f, s)| *f == s.is_some())
    }
}

/// A collection of SC-paired runs.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    pub runs: Vec<TracedRun>,
}

impl TraceSet {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn total_interventions(&self) -> usize {
        self.runs.iter().map(|r| r.intervention_count()).sum()
    }

    /// All (state, applied control) pairs, in run order.
    pub fn state_action_pairs(&self) -> Vec<(State, Control)> {
        self.runs
            .iter()
            .flat_map(|r| r.trajectory.steps.iter().cloned())
            .collect()
    }
}

/// Per-step verdict of the safety controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionKind {
    PassThrough,
    Override,
    Inevitable,
}

/// Which solve path produced a decision (for the minimal-interference audit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    /// Forward simulation already safe; no solver call.
    SimulationOnly,
    /// Pinned feasibility solve was feasible.
    PinnedFeasible,
    /// Pinned infeasible, unpinned feasible.
    UnpinnedFeasible,
    /// Both solves infeasible.
    BothInfeasible,
}

#[derive(Debug, Clone)]
pub struct SafetyDecision {
    pub kind: DecisionKind,
    pub applied: Control,
    pub candidate: Control,
    pub path: SolvePath,
    /// Max phi over the decision-time plan (the forward plan actually adopted).
    pub plan_max_phi: f64,
    /// Single policy inference time in seconds.
    pub t_lc: f64,
    /// Pinned solve time in seconds (0 when not run).
    pub t_sc1: f64,
    /// Unpinned (override) solve time in seconds (0 when not run).
    pub t_sc2: f64,
}

/// Anything that can screen a candidate control at a state.
pub trait SafetyFilter {
    fn filter(&self, x: &State, policy: &crate::policy::Mlp) -> SafetyDecision;
}

/// Roll a policy out for `h` steps: `u_t = clamp(policy(x_t))`,
/// `x_{t+1} = f(x_t, u_t)`. The returned trajectory has `h + 1` pairs.
pub fn rollout(
    policy: &crate::policy::Mlp,
    dynamics: &dyn DynamicsModel,
    x0: &State,
    h: usize,
) -> Result<Trajectory, CoreError> {
    let mut steps = Vec::with_capacity(h + 1);
    let mut x = x0.clone();
    for t in 0..=h {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::FailedRollout { step: t });
        }
        let u = dynamics.clamp_control(&policy.forward(&x));
        let next = if t < h { Some(dynamics.step(&x, &u)) } else { None };
        steps.push((x, u));
        match next {
            Some(nx) => x = nx,
            None => break,
        }
    }
    Ok(Trajectory { steps })
}

/// SC-paired rollout: at each step the applied control is the safety
/// decision's output. Also returns the per-step decisions.
pub fn rollout_with_sc(
    policy: &crate::policy::Mlp,
    filter: &dyn SafetyFilter,
    dynamics: &dyn DynamicsModel,
    x0: &State,
    h: usize,
) -> Result<(TracedRun, Vec<SafetyDecision>), CoreError> {
    rollout_with_sc_until(policy, filter, dynamics, x0, h, |_| false)
}

/// As [`rollout_with_sc`], stopping early when `terminal(x)` holds.
pub fn rollout_with_sc_until(
    policy: &crate::policy::Mlp,
    filter: &dyn SafetyFilter,
    dynamics: &dyn DynamicsModel,
    x0: &State,
    h: usize,
    terminal: impl Fn(&State) -> bool,
) -> Result<(TracedRun, Vec<SafetyDecision>), CoreError> {
    let mut steps = Vec::new();
    let mut flags = Vec::new();
    let mut substitutes = Vec::new();
    let mut decisions = Vec::new();
    let mut x = x0.clone();
    for t in 0..=h {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::FailedRollout { step: t });
        }
        let stop = t == h || terminal(&x);
        if stop {
            // Terminal record: the policy's own action, never screened.
            let u = dynamics.clamp_control(&policy.forward(&x));
            steps.push((x, u));
            flags.push(false);
            substitutes.push(None);
            break;
        }
        let decision = filter.filter(&x, policy);
        let intervened = decision.kind != DecisionKind::PassThrough;
        let applied = decision.applied.clone();
        flags.push(intervened);
        substitutes.push(if intervened { Some(applied.clone()) } else { None });
        decisions.push(decision);
        let next = dynamics.step(&x, &applied);
        steps.push((x, applied));
        x = next;
    }
    Ok((TracedRun { trajectory: Trajectory { steps }, flags, substitutes }, decisions))
}
