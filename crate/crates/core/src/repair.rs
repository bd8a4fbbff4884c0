//! Policy repair from safety-controller interventions: the naive retraining
//! loop, and the minimally-deviating variant that synthesizes perturbed safe
//! trajectories close to the original policy's behavior.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::envs::Environment;
use crate::policy::{fit, solve_param_update, FitConfig, FitError, Mlp};
use crate::seeding::{self, tags};
use crate::trajopt::{constrained_ilqr, PenaltyConfig, SolveStatus, StageCost, TrustRegion};
use crate::types::{
    rollout_with_sc_until, Control, CoreError, DynamicsModel, SafetyFilter, SafetyFn, State,
    TraceSet, TracedRun, Trajectory,
};

/// Deviation of `policy` from `reference` over the states of `traces`:
/// `sum_tau sum_t 1/2 ||reference(x_t) - policy(x_t)||^2`.
///
/// Measured on raw (pre-clamp) outputs so it stays differentiable.
pub fn deviation_loss(reference: &Mlp, policy: &Mlp, traces: &TraceSet) -> f64 {
    traces
        .runs
        .iter()
        .flat_map(|r| r.trajectory.states())
        .map(|x| {
            let d = reference.forward_preclamp(x) - policy.forward_preclamp(x);
            0.5 * d.norm_squared()
        })
        .sum()
}

/// Quadratic stage blocks of the deviation objective about a nominal state,
/// with `g = current(x) - reference(x)` and `P` the transposed state Jacobian
/// of the current policy:
/// `Q_x = -2 P g`, `Q_u = 2 g`, `Q_xx = P g g^T P^T`, `Q_xu = P g g^T`,
/// `Q_uu = g g^T` (unscaled; callers apply `1 / (4 |Gamma|)`).
pub fn build_stage_blocks(current: &Mlp, reference: &Mlp, x: &State) -> StageCost {
    let g = current.forward_preclamp(x) - reference.forward_preclamp(x);
    let p = current.jac_state(x).transpose();
    let ggt = &g * g.transpose();
    StageCost {
        q0: 0.0,
        q_x: -2.0 * (&p * &g),
        q_u: 2.0 * g,
        q_xx: &p * &ggt * p.transpose(),
        q_xu: &p * &ggt,
        q_uu: ggt,
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Per-step trust region on the state perturbation.
    pub delta_x: f64,
    /// Split long trajectories into solve windows of this many transitions.
    pub window: Option<usize>,
    pub penalty: PenaltyConfig,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub trajectories: Vec<Trajectory>,
    /// Windows whose solve left the safety tolerance; emitted unperturbed.
    pub fallbacks: usize,
}

impl SynthesisOutput {
    pub fn pairs(&self) -> Vec<(State, Control)> {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.iter().cloned())
            .collect()
    }
}

/// Perturb each safe nominal trajectory toward the reference policy's
/// behavior by solving a constrained trajectory optimization with the
/// deviation blocks as objective.
///
/// Every nominal must already satisfy `phi <= tol_phi` at all states; any
/// window whose perturbed solve is not certified safe falls back to the
/// unperturbed nominal. Hence all output trajectories are safe and
/// dynamically consistent.
pub fn synthesize_perturbations(
    traces: &TraceSet,
    current: &Mlp,
    reference: &Mlp,
    dynamics: &dyn DynamicsModel,
    phi: &dyn SafetyFn,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutput, CoreError> {
    if traces.is_empty() {
        return Err(CoreError::EmptyInput("synthesis needs at least one trajectory".into()));
    }
    let tol = cfg.penalty.tol_phi;
    for (i, r) in traces.runs.iter().enumerate() {
        if let Some(bad) = r.trajectory.states().map(|x| phi.phi(x)).find(|p| *p > tol) {
            return Err(CoreError::PreconditionViolated(format!(
                "nominal trajectory {i} is unsafe (phi = {bad:.6})"
            )));
        }
    }
    let scale = 1.0 / (4.0 * traces.runs.len() as f64);
    let tr = TrustRegion::new(cfg.delta_x);

    // Cut each trajectory into windows of at most `window` transitions; each
    // window is itself a consistent trajectory starting on the nominal.
    let mut windows: Vec<Trajectory> = Vec::new();
    for r in &traces.runs {
        let steps = &r.trajectory.steps;
        if steps.len() < 2 {
            continue;
        }
        let w = cfg.window.unwrap_or(steps.len() - 1).max(1);
        let mut a = 0;
        while a + 1 < steps.len() {
            let b = (a + w).min(steps.len() - 1);
            windows.push(Trajectory { steps: steps[a..=b].to_vec() });
            a = b;
        }
    }

    let solved: Vec<Result<(Trajectory, bool), CoreError>> = windows
        .par_iter()
        .map(|nominal| {
            let mut objective = Vec::with_capacity(nominal.steps.len());
            for (x, _) in &nominal.steps {
                let mut s = build_stage_blocks(current, reference, x);
                s.q_x *= scale;
                s.q_u *= scale;
                s.q_xx *= scale;
                s.q_xu *= scale;
                s.q_uu *= scale;
                objective.push(s);
            }
            let sol = constrained_ilqr(
                nominal,
                &objective,
                dynamics,
                phi,
                &cfg.penalty,
                &tr,
                None,
            )?;
            if sol.status == SolveStatus::ConstraintsSatisfied {
                Ok((sol.trajectory, false))
            } else {
                Ok((nominal.clone(), true))
            }
        })
        .collect();

    let mut out = SynthesisOutput { trajectories: Vec::new(), fallbacks: 0 };
    for s in solved {
        let (t, fb) = s?;
        debug_assert!(t.states().all(|x| phi.phi(x) <= tol + 1e-9));
        out.trajectories.push(t);
        if fb {
            out.fallbacks += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    /// Fit the policy on the perturbed (state, control) pairs.
    PerturbedPairs,
    /// Least-squares parameter update from the perturbation triples.
    LeastSquares,
}

#[derive(Debug, Clone)]
pub struct RepairConfig {
    /// Number of SC-paired rollouts per collection round.
    pub gamma_size: usize,
    /// Naive repair iteration cap.
    pub n1: usize,
    /// Minimal-deviation outer iteration cap.
    pub n2: usize,
    /// Stop when the deviation loss changes by at most this much.
    pub epsilon_j: f64,
    pub fit: FitConfig,
    pub synthesis: SynthesisConfig,
    pub retrain: RetrainMode,
    /// Ridge for the least-squares retrain mode.
    pub ridge: f64,
    /// Parameter trust region for retraining.
    pub delta_theta: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The input policy already ran without interventions.
    NoInterventions,
    /// Deviation loss converged within `epsilon_j`.
    ConvergedJ,
    /// Outer iteration cap reached.
    IterationCap,
    /// A naive repair pass could not reach zero interventions.
    NaiveRepairFailed,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Deviation loss from the original policy on fresh evaluation rollouts.
    pub j: f64,
    /// Interventions observed when this iterate was collected.
    pub interventions: usize,
    pub status: &'static str,
}

#[derive(Debug, Clone)]
pub struct RepairReport {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub synthesis_fallbacks: usize,
}

#[derive(Debug)]
pub struct NaiveOutcome {
    pub policy: Mlp,
    /// Traces from the final collection round (zero interventions when
    /// `converged`).
    pub traces: TraceSet,
    pub interventions_history: Vec<usize>,
    pub converged: bool,
}

fn collect_traces(
    policy: &Mlp,
    env: &dyn Environment,
    filter: &(dyn SafetyFilter + Sync),
    count: usize,
    seed: u64,
    tag: u64,
    counter_base: u64,
) -> Result<TraceSet, CoreError> {
    let runs: Vec<Result<TracedRun, CoreError>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = seeding::rng(seed, tag, counter_base + j as u64);
            let x0 = env.sample_initial(&mut rng);
            let (run, _) = rollout_with_sc_until(
                policy,
                filter,
                env.dynamics(),
                &x0,
                env.episode_cap(),
                |x| env.is_terminal(x),
            )?;
            Ok(run)
        })
        .collect();
    let mut set = TraceSet::default();
    for r in runs {
        set.runs.push(r?);
    }
    Ok(set)
}

fn fit_or_last_stable(
    policy: &Mlp,
    data: &[(State, Control)],
    cfg: &FitConfig,
) -> Result<Mlp, CoreError> {
    match fit(policy, data, cfg) {
        Ok((p, _)) => Ok(p),
        Err(FitError::Diverged { last_stable }) => Ok(last_stable),
        Err(FitError::EmptyDataset) => {
            Err(CoreError::EmptyInput("retraining dataset is empty".into()))
        }
    }
}

/// Extra copies of each screened (intervened) step added to the retraining
/// set. Avoidance maneuvers are a small fraction of a rollout's steps, so
/// without oversampling the fit loss is dominated by ordinary tracking and
/// the maneuver is learned too slowly to reach zero interventions.
const INTERVENTION_OVERSAMPLE: usize = 9;

/// Naive repair: collect SC-paired rollouts and retrain on the applied
/// (screened) controls until a collection round sees zero interventions.
///
/// Training pairs are accumulated across rounds (every round's behavior is
/// screened, hence a valid target) so later fits do not forget maneuvers
/// that earlier rounds exercised on different initial states.
pub fn naive_repair(
    policy: &Mlp,
    env: &dyn Environment,
    filter: &(dyn SafetyFilter + Sync),
    cfg: &RepairConfig,
    seed_round: u64,
) -> Result<NaiveOutcome, CoreError> {
    let mut current = policy.clone();
    let mut history = Vec::new();
    let mut dataset: Vec<(State, Control)> = Vec::new();
    for iter in 0..=cfg.n1 {
        let counter_base = seed_round
            .wrapping_mul(1_000_000)
            .wrapping_add(iter as u64 * cfg.gamma_size as u64);
        let traces = collect_traces(
            &current,
            env,
            filter,
            cfg.gamma_size,
            cfg.seed,
            tags::REPAIR_ROLLOUT,
            counter_base,
        )?;
        let interventions = traces.total_interventions();
        history.push(interventions);
        if interventions == 0 {
            return Ok(NaiveOutcome {
                policy: current,
                traces,
                interventions_history: history,
                converged: true,
            });
        }
        if iter == cfg.n1 {
            return Ok(NaiveOutcome {
                policy: current,
                traces,
                interventions_history: history,
                converged: false,
            });
        }
        dataset.extend(traces.state_action_pairs());
        for r in &traces.runs {
            for (i, flagged) in r.flags.iter().enumerate() {
                if *flagged {
                    for _ in 0..INTERVENTION_OVERSAMPLE {
                        dataset.push(r.trajectory.steps[i].clone());
                    }
                }
            }
        }
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.seed = seeding::derive(cfg.seed, tags::FIT_SHUFFLE, counter_base);
        fit_cfg.trust_region = cfg.delta_theta;
        current = fit_or_last_stable(&current, &dataset, &fit_cfg)?;
    }
    unreachable!("loop always returns");
}

/// Minimally-deviating repair.
///
/// Starts from a naive repair, then alternates synthesizing perturbed safe
/// trajectories (close to the original policy's actions), retraining on them,
/// and re-running naive repair to restore the zero-intervention certificate.
/// Deviation loss is evaluated on freshly sampled rollouts each iteration.
/// The returned policy is always the most recent one that passed a
/// zero-intervention check.
pub fn min_dev_repair(
    original: &Mlp,
    env: &dyn Environment,
    filter: &(dyn SafetyFilter + Sync),
    cfg: &RepairConfig,
) -> Result<(Mlp, RepairReport), CoreError> {
    let mut records = Vec::new();
    let mut fallbacks = 0;

    let eval_j = |policy: &Mlp, round: u64| -> Result<f64, CoreError> {
        let traces = collect_traces(
            policy,
            env,
            filter,
            cfg.gamma_size,
            cfg.seed,
            tags::EVAL_ROLLOUT,
            round * 1_000_000,
        )?;
        Ok(deviation_loss(original, policy, &traces))
    };

    let naive = naive_repair(original, env, filter, cfg, 0)?;
    if naive.interventions_history == [0] {
        records.push(IterationRecord { iteration: 0, j: 0.0, interventions: 0, status: "clean" });
        return Ok((
        original.clone(),
            RepairReport {
                records,
                termination: Termination::NoInterventions,
                synthesis_fallbacks: 0,
            },
        ));
    }
    let observed: usize = naive.interventions_history.iter().sum();
    if !naive.converged {
        records.push(IterationRecord {
            iteration: 0,
            j: eval_j(&naive.policy, 0)?,
            interventions: observed,
            status: "naive-failed",
        });
        return Ok((
            naive.policy,
            RepairReport {
                records,
                termination: Termination::NaiveRepairFailed,
                synthesis_fallbacks: 0,
            },
        ));
    }

    let mut best = naive.policy;
    let mut traces = naive.traces;
    let mut j_prev = eval_j(&best, 0)?;
    records.push(IterationRecord {
        iteration: 0,
        j: j_prev,
        interventions: observed,
        status: "naive",
    });

    for i in 1..=cfg.n2 {
        let synth = synthesize_perturbations(
            &traces,
            &best,
            original,
            env.dynamics(),
            env.phi(),
            &cfg.synthesis,
        )?;
        fallbacks += synth.fallbacks;

        let candidate = match cfg.retrain {
            RetrainMode::PerturbedPairs => {
                let mut fit_cfg = cfg.fit.clone();
                fit_cfg.seed =
                    seeding::derive(cfg.seed, tags::FIT_SHUFFLE, 0x5000_0000 + i as u64);
                fit_cfg.trust_region = cfg.delta_theta;
                fit_or_last_stable(&best, &synth.pairs(), &fit_cfg)?
            }
            RetrainMode::LeastSquares => {
                let mut triples = Vec::new();
                for (nom, pert) in traces
                    .runs
                    .iter()
                    .flat_map(|r| {
                        windows_of(&r.trajectory, cfg.synthesis.window)
                    })
                    .zip(synth.trajectories.iter())
                {
                    for ((xn, un), (xp, up)) in nom.steps.iter().zip(pert.steps.iter()) {
                        triples.push((xn.clone(), xp - xn, up - un));
                    }
                }
                let upd = solve_param_update(&best, &triples, cfg.ridge, cfg.delta_theta)?;
                best.clone().with_params(best.params() + upd.delta_theta)?
            }
        };

        match naive_repair(&candidate, env, filter, cfg, i as u64)? {
            NaiveOutcome { converged: false, .. } => {
                records.push(IterationRecord {
                    iteration: i,
                    j: j_prev,
                    interventions: 0,
                    status: "naive-failed",
                });
                return Ok((
                    best,
                    RepairReport {
                        records,
                        termination: Termination::NaiveRepairFailed,
                        synthesis_fallbacks: fallbacks,
                    },
                ));
            }
            NaiveOutcome { policy, traces: t, interventions_history, .. } => {
                let interventions = interventions_history.iter().sum();
                best = policy;
                traces = t;
                let j = eval_j(&best, i as u64)?;
                records.push(IterationRecord { iteration: i, j, interventions, status: "mindev" });
                let done = (j - j_prev).abs() <= cfg.epsilon_j;
                j_prev = j;
                if done {
                    return Ok((
                        best,
                        RepairReport {
                            records,
                            termination: Termination::ConvergedJ,
                            synthesis_fallbacks: fallbacks,
                        },
                    ));
                }
            }
        }
    }
    Ok((
        best,
        RepairReport {
            records,
            termination: Termination::IterationCap,
            synthesis_fallbacks: fallbacks,
        },
    ))
}

fn windows_of(traj: &Trajectory, window: Option<usize>) -> Vec<Trajectory> {
    let steps = &traj.steps;
    if steps.len() < 2 {
        return Vec::new();
    }
    let w = window.unwrap_or(steps.len() - 1).max(1);
    let mut out = Vec::new();
    let mut a = 0;
    while a + 1 < steps.len() {
        let b = (a + w).min(steps.len() - 1);
        out.push(Trajectory { steps: steps[a..=b].to_vec() });
        a = b;
    }
    out
}

/// Constants for the per-pair descent condition, estimated from secant
/// ratios of the policy around sampled states.
#[derive(Debug, Clone, Copy)]
pub struct DescentConstants {
    /// Parameter-Lipschitz estimate of the policy output.
    pub l_theta: f64,
    /// State-Lipschitz estimate of the policy output.
    pub lambda_x: f64,
    /// Parameter-Lipschitz estimate (same sampling, kept separate for the
    /// condition's two roles).
    pub lambda_theta: f64,
}

pub fn estimate_descent_constants(
    policy: &Mlp,
    states: &[State],
    seed: u64,
) -> DescentConstants {
    use rand::Rng;
    let mut rng = seeding::rng(seed, tags::AUDIT, 0);
    let h = 1e-4;
    let mut lambda_x: f64 = 0.0;
    let mut lambda_theta: f64 = 0.0;
    for x in states {
        for _ in 0..8 {
            let mut dx = DVector::from_fn(x.len(), |_, _| rng.gen_range(-1.0..1.0));
            if dx.norm() < 1e-12 {
                continue;
            }
            dx *= h / dx.norm();
            let d = policy.forward_preclamp(&(x + &dx)) - policy.forward_preclamp(x);
            lambda_x = lambda_x.max(d.norm() / h);

            let mut dth = DVector::from_fn(policy.param_count(), |_, _| rng.gen_range(-1.0..1.0));
            if dth.norm() < 1e-12 {
                continue;
            }
            dth *= h / dth.norm();
            let shifted = policy
                .clone()
                .with_params(policy.params() + &dth)
                .expect("finite perturbation");
            let d = shifted.forward_preclamp(x) - policy.forward_preclamp(x);
            lambda_theta = lambda_theta.max(d.norm() / h);
        }
    }
    DescentConstants { l_theta: lambda_theta, lambda_x, lambda_theta }
}

/// Sufficient-decrease test for one synthesized pair: the linear model change
/// must undercut the worst-case curvature and drift terms.
pub fn descent_check(
    stage: &StageCost,
    dx: &DVector<f64>,
    du: &DVector<f64>,
    g_norm: f64,
    c: &DescentConstants,
    delta_x: f64,
    delta_theta: f64,
) -> bool {
    let lhs = stage.q_x.dot(dx) + stage.q_u.dot(du);
    let rhs = -c.l_theta * c.l_theta * delta_theta * delta_theta / 2.0
        - (g_norm / 2.0) * (c.lambda_x * delta_x + c.lambda_theta * delta_theta);
    lhs <= rhs + 1e-12
}

/// Count how many steps of a synthesized trajectory satisfy the descent
/// condition against its nominal. Returns `(satisfied, total)`.
pub fn descent_audit(
    nominal: &Trajectory,
    perturbed: &Trajectory,
    current: &Mlp,
    reference: &Mlp,
    c: &DescentConstants,
    delta_theta: f64,
) -> (usize, usize) {
    let mut sat = 0;
    let mut total = 0;
    for ((xn, un), (xp, up)) in nominal.steps.iter().zip(perturbed.steps.iter()) {
        let dx = xp - xn;
        let du = up - un;
        if dx.amax() < 1e-12 && du.amax() < 1e-12 {
            continue;
        }
        let stage = build_stage_blocks(current, reference, xn);
        let g_norm =
            (current.forward_preclamp(xn) - reference.forward_preclamp(xn)).norm();
        total += 1;
        if descent_check(&stage, &dx, &du, g_norm, c, dx.amax(), delta_theta) {
            sat += 1;
        }
    }
    (sat, total)
}
