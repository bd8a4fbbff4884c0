//! Experiment orchestration shared by the command-line driver and the
//! end-to-end tests: expert demonstrations, behavior cloning of the initial
//! policy, and screened/unscreened evaluation rollouts.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analysis::RunSeries;
use crate::envs::{Environment, LaneKeepEnv, MountainCarEnv};
use crate::mpsc::SafetyController;
use crate::policy::{fit, FitConfig, FitError, FitReport, Mlp};
use crate::seeding::{self, tags};
use crate::types::{
    rollout_with_sc_until, Control, CoreError, SafetyDecision, State, TracedRun, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    MountainCar,
    LaneKeep,
}

pub fn make_env(kind: EnvKind) -> Box<dyn Environment> {
    match kind {
        EnvKind::MountainCar => Box::new(MountainCarEnv::default()),
        EnvKind::LaneKeep => Box::new(LaneKeepEnv::default()),
    }
}

/// Roll the scripted expert out from `x0` until the terminal set or the
/// episode cap.
pub fn expert_rollout(env: &dyn Environment, x0: &State) -> Trajectory {
    let dynamics = env.dynamics();
    let mut steps = Vec::new();
    let mut x = x0.clone();
    for t in 0..=env.episode_cap() {
        let u = dynamics.clamp_control(&env.expert(&x));
        let stop = t == env.episode_cap() || env.is_terminal(&x);
        steps.push((x.clone(), u.clone()));
        if stop {
            break;
        }
        x = dynamics.step(&x, &u);
    }
    Trajectory { steps }
}

/// Demonstration pairs from `episodes` seeded expert rollouts.
pub fn expert_dataset(
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
) -> Vec<(State, Control)> {
    let mut data = Vec::new();
    for e in 0..episodes {
        let mut rng = seeding::rng(seed, tags::INIT_STATE, e as u64);
        let x0 = env.sample_initial(&mut rng);
        data.extend(expert_rollout(env, &x0).steps);
    }
    data
}

/// Behavior-clone the expert into a fresh tanh MLP with the given hidden
/// layer widths. The output clamp mirrors the environment's control box.
pub fn behavior_clone(
    env: &dyn Environment,
    hidden: &[usize],
    episodes: usize,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<(Mlp, FitReport), CoreError> {
    let dynamics = env.dynamics();
    let mut sizes = vec![dynamics.state_dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(dynamics.control_dim());
    let (lo, hi) = dynamics.control_bounds();
    let init = Mlp::random(&sizes, seed).with_clamp(lo, hi);
    let data = expert_dataset(env, episodes, seed);
    if data.is_empty() {
        return Err(CoreError::EmptyInput("expert dataset is empty".into()));
    }
    // Standardize inputs for the fit (state scales differ by orders of
    // magnitude), then fold the standardization back into the first layer.
    let n = dynamics.state_dim();
    let count = data.len() as f64;
    let mut mean = DVector::zeros(n);
    for (x, _) in &data {
        mean += x;
    }
    mean /= count;
    let mut var = DVector::zeros(n);
    for (x, _) in &data {
        let d = x - &mean;
        var += d.component_mul(&d);
    }
    var /= count;
    let std = var.map(|v: f64| v.sqrt().max(1e-9));
    let standardized: Vec<(State, Control)> = data
        .iter()
        .map(|(x, u)| (x.zip_map(&mean, |a, m| a - m).component_div(&std), u.clone()))
        .collect();
    match fit(&init, &standardized, fit_cfg) {
        Ok((p, report)) => {
            let s = std.map(|v| 1.0 / v);
            let c = -mean.component_div(&std);
            Ok((p.precompose_input_affine(&s, &c), report))
        }
        Err(FitError::Diverged { .. }) => Err(CoreError::FitDiverged),
        Err(FitError::EmptyDataset) => {
            Err(CoreError::EmptyInput("expert dataset is empty".into()))
        }
    }
}

/// Fraction of dataset pairs where the policy's control differs from the
/// recorded control by more than `tol` in any component.
pub fn control_mismatch(policy: &Mlp, data: &[(State, Control)], tol: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let bad = data
        .iter()
        .filter(|(x, u)| (policy.forward(x) - u).amax() > tol)
        .count();
    bad as f64 / data.len() as f64
}

/// `count` SC-paired evaluation rollouts with per-step decisions, seeded from
/// the evaluation stream.
pub fn eval_with_sc(
    policy: &Mlp,
    env: &dyn Environment,
    count: usize,
    seed: u64,
    counter_base: u64,
) -> Result<Vec<(TracedRun, Vec<SafetyDecision>)>, CoreError> {
    let sc = SafetyController::new(env.dynamics(), env.phi(), env.sc_horizon())
        .with_margin(env.sc_margin());
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = seeding::rng(seed, tags::EVAL_ROLLOUT, counter_base + j as u64);
            let x0 = env.sample_initial(&mut rng);
            rollout_with_sc_until(policy, &sc, env.dynamics(), &x0, env.episode_cap(), |x| {
                env.is_terminal(x)
            })
        })
        .collect()
}

/// `count` plain policy rollouts on the same evaluation seeds.
pub fn eval_without_sc(
    policy: &Mlp,
    env: &dyn Environment,
    count: usize,
    seed: u64,
    counter_base: u64,
) -> Result<Vec<Trajectory>, CoreError> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = seeding::rng(seed, tags::EVAL_ROLLOUT, counter_base + j as u64);
            let x0 = env.sample_initial(&mut rng);
            let dynamics = env.dynamics();
            let mut steps = Vec::new();
            let mut x = x0;
            for t in 0..=env.episode_cap() {
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(CoreError::FailedRollout { step: t });
                }
                let u = dynamics.clamp_control(&policy.forward(&x));
                let stop = t == env.episode_cap() || env.is_terminal(&x);
                steps.push((x.clone(), u.clone()));
                if stop {
                    break;
                }
                x = dynamics.step(&x, &u);
            }
            Ok(Trajectory { steps })
        })
        .collect()
}

/// Speed and centerline-distance series of a lane-keeping trajectory.
pub fn lane_series(env: &LaneKeepEnv, traj: &Trajectory) -> RunSeries {
    RunSeries {
        speed: traj.states().map(|x| x[3]).collect(),
        distance: traj.states().map(|x| env.phi.radial_error(x).abs()).collect(),
    }
}

/// `(steps, reached goal, terminal speed)` of a mountain car trajectory.
pub fn mc_goal_stats(env: &MountainCarEnv, traj: &Trajectory) -> (usize, bool, f64) {
    use crate::envs::mountain_car::GOAL_POS;
    let last = traj.steps.last().expect("non-empty trajectory");
    let _ = env;
    (traj.horizon(), last.0[0] >= GOAL_POS, last.0[1])
}
