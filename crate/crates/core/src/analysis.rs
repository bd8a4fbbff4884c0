//! Post-hoc analysis: intervention-rate estimates, the performance
//! degradation bound and its empirical audit, the exact performance
//! difference identity, and the evaluation metric battery.

use crate::policy::Mlp;
use crate::types::{rollout, CoreError, DynamicsModel, State, TraceSet};

/// Fractions of runs with at least 1, 2 and 3 interventions.
/// Nesting `eps1 >= eps2 >= eps3` holds by construction.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonEstimate {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub runs: usize,
}

pub fn estimate_epsilons(traces: &TraceSet) -> EpsilonEstimate {
    let n = traces.runs.len();
    let at_least = |k: usize| {
        traces.runs.iter().filter(|r| r.intervention_count() >= k).count() as f64 / n.max(1) as f64
    };
    EpsilonEstimate { eps1: at_least(1), eps2: at_least(2), eps3: at_least(3), runs: n }
}

/// Worst-case degradation factor over a horizon `h`:
/// `eps1 * h + eps2 * (h - 1) + eps3 * (h - 1) * h / 2`.
pub fn theorem1_bound(eps: &EpsilonEstimate, h: usize) -> f64 {
    let hf = h as f64;
    eps.eps1 * hf + eps.eps2 * (hf - 1.0) + eps.eps3 * (hf - 1.0) * hf / 2.0
}

/// Paired-seed audit of the degradation bound.
///
/// `cost_base[i]` and `cost_filtered[i]` are total episode costs of the same
/// seed without and with screening; costs must be normalized so per-step
/// costs lie in `[0, 1]` for the bound to apply. The bounded-advantage
/// assumption behind the bound is not machine-checked here, which
/// `assumption_unchecked` records.
#[derive(Debug, Clone, Copy)]
pub struct DegradationAudit {
    pub mean_degradation: f64,
    pub std_error: f64,
    pub bound: f64,
    /// `mean_degradation <= bound + 2 * std_error`.
    pub within_bound: bool,
    pub assumption_unchecked: bool,
}

pub fn degradation_audit(
    cost_base: &[f64],
    cost_filtered: &[f64],
    eps: &EpsilonEstimate,
    h: usize,
) -> Result<DegradationAudit, CoreError> {
    if cost_base.is_empty() || cost_base.len() != cost_filtered.len() {
        return Err(CoreError::EmptyInput(
            "degradation audit needs equal-length, non-empty paired costs".into(),
        ));
    }
    let n = cost_base.len() as f64;
    let diffs: Vec<f64> =
        cost_filtered.iter().zip(cost_base).map(|(f, b)| f - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    let bound = theorem1_bound(eps, h);
    Ok(DegradationAudit {
        mean_degradation: mean,
        std_error: se,
        bound,
        within_bound: mean <= bound + 2.0 * se,
        assumption_unchecked: true,
    })
}

/// Finite-horizon cost-to-go of `policy` from `x` with `steps` transitions
/// remaining: the sum of `cost` over all visited states including `x`.
fn value(
    policy: &Mlp,
    dynamics: &dyn DynamicsModel,
    cost: &dyn Fn(&State) -> f64,
    x: &State,
    steps: usize,
) -> Result<f64, CoreError> {
    let traj = rollout(policy, dynamics, x, steps)?;
    Ok(traj.states().map(cost).sum())
}

/// Residual of the exact performance-difference identity for deterministic
/// dynamics: `eta(hat) - eta(base) = sum_t A_base(x_t, u_t)` along the
/// `hat` rollout, where `A` is the advantage of `hat`'s action under the
/// base policy's cost-to-go. Returns the absolute residual.
pub fn perf_difference_residual(
    policy_hat: &Mlp,
    policy_base: &Mlp,
    dynamics: &dyn DynamicsModel,
    cost: &dyn Fn(&State) -> f64,
    x0: &State,
    h: usize,
) -> Result<f64, CoreError> {
    let hat = rollout(policy_hat, dynamics, x0, h)?;
    let eta_hat: f64 = hat.states().map(cost).sum();
    let eta_base = value(policy_base, dynamics, cost, x0, h)?;
    let mut advantage_sum = 0.0;
    for (t, (x, u)) in hat.steps.iter().enumerate() {
        let v = value(policy_base, dynamics, cost, x, h - t)?;
        let q = if t < h {
            cost(x) + value(policy_base, dynamics, cost, &dynamics.step(x, u), h - t - 1)?
        } else {
            cost(x)
        };
        advantage_sum += q - v;
    }
    Ok(((eta_hat - eta_base) - advantage_sum).abs())
}

/// Per-run evaluation series: instantaneous speed and distance from the
/// reference path, one entry per step.
#[derive(Debug, Clone)]
pub struct RunSeries {
    pub speed: Vec<f64>,
    pub distance: Vec<f64>,
}

/// The metric battery: per-run statistics averaged across runs.
/// Variances are population variances; "change" statistics are over
/// consecutive differences within a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricSet {
    pub avg_speed: f64,
    pub lowest_speed: f64,
    pub avg_distance: f64,
    pub total_steps: f64,
    pub var_speed: f64,
    pub std_speed_change: f64,
    pub var_distance: f64,
    pub std_distance_change: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_var(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn diffs(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn table1_metrics(runs: &[RunSeries]) -> MetricSet {
    let mut out = MetricSet::default();
    let n = runs.len() as f64;
    if runs.is_empty() {
        return out;
    }
    for r in runs {
        assert!(!r.speed.is_empty() && r.speed.len() == r.distance.len());
        out.avg_speed += mean(&r.speed);
        out.lowest_speed += r.speed.iter().cloned().fold(f64::INFINITY, f64::min);
        out.avg_distance += mean(&r.distance);
        out.total_steps += r.speed.len() as f64;
        out.var_speed += pop_var(&r.speed);
        out.std_speed_change += pop_var(&diffs(&r.speed)).sqrt();
        out.var_distance += pop_var(&r.distance);
        out.std_distance_change += pop_var(&diffs(&r.distance)).sqrt();
    }
    out.avg_speed /= n;
    out.lowest_speed /= n;
    out.avg_distance /= n;
    out.total_steps /= n;
    out.var_speed /= n;
    out.std_speed_change /= n;
    out.var_distance /= n;
    out.std_distance_change /= n;
    out
}

/// Goal-reaching statistics for episodic tasks: fraction of runs reaching the
/// goal, mean steps to goal among those, and mean speed at the final state.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoalMetrics {
    pub goal_rate: f64,
    pub mean_steps_to_goal: f64,
    pub mean_terminal_speed: f64,
}

pub fn goal_metrics(
    runs: &[(usize, bool, f64)], // (steps, reached, terminal speed)
) -> GoalMetrics {
    if runs.is_empty() {
        return GoalMetrics::default();
    }
    let n = runs.len() as f64;
    let reached: Vec<_> = runs.iter().filter(|(_, r, _)| *r).collect();
    GoalMetrics {
        goal_rate: reached.len() as f64 / n,
        mean_steps_to_goal: if reached.is_empty() {
            f64::NAN
        } else {
            reached.iter().map(|(s, _, _)| *s as f64).sum::<f64>() / reached.len() as f64
        },
        mean_terminal_speed: runs.iter().map(|(_, _, v)| v).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Control, TracedRun, Trajectory};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn run_with_interventions(k: usize) -> TracedRun {
        let steps: Vec<(State, Control)> = (0..6)
            .map(|_| (DVector::zeros(1), DVector::zeros(1)))
            .collect();
        let flags: Vec<bool> = (0..6).map(|t| t < k).collect();
        let substitutes = flags
            .iter()
            .map(|f| if *f { Some(DVector::zeros(1)) } else { None })
            .collect();
        TracedRun { trajectory: Trajectory { steps }, flags, substitutes }
    }

    #[test]
    fn epsilon_fixture() {
        // 10 runs: four with >= 1 intervention, one of those with 2.
        let mut runs = vec![run_with_interventions(0); 6];
        runs.extend(vec![run_with_interventions(1); 3]);
        runs.push(run_with_interventions(2));
        let eps = estimate_epsilons(&TraceSet { runs });
        assert_relative_eq!(eps.eps1, 0.4);
        assert_relative_eq!(eps.eps2, 0.1);
        assert_relative_eq!(eps.eps3, 0.0);
    }

    #[test]
    fn epsilons_are_nested() {
        for pattern in [[0usize, 1, 2, 3], [3, 3, 3, 3], [0, 0, 0, 1], [2, 0, 5, 1]] {
            let runs = pattern.iter().map(|k| run_with_interventions(*k)).collect();
            let eps = estimate_epsilons(&TraceSet { runs });
            assert!(eps.eps1 >= eps.eps2 && eps.eps2 >= eps.eps3);
        }
    }

    #[test]
    fn bound_hand_value() {
        let eps = EpsilonEstimate { eps1: 0.1, eps2: 0.05, eps3: 0.02, runs: 100 };
        assert_relative_eq!(theorem1_bound(&eps, 10), 2.35, epsilon = 1e-12);
    }

    fn const_policy(dim_in: usize, value: f64) -> Mlp {
        let mut params = vec![0.0; dim_in + 1];
        params[dim_in] = value;
        Mlp::zeros(&[dim_in, 1]).with_params(DVector::from_vec(params)).unwrap()
    }

    struct Integrator;
    impl DynamicsModel for Integrator {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn step(&self, x: &State, u: &Control) -> State {
            DVector::from_vec(vec![x[0] + u[0]])
        }
        fn control_bounds(&self) -> (Control, Control) {
            (DVector::from_vec(vec![-1e9]), DVector::from_vec(vec![1e9]))
        }
    }

    #[test]
    fn perf_difference_toy_chain() {
        // x' = x + u, c(x) = min(x^2, 1), base stays at 0, hat steps to 1.
        // eta(hat) - eta(base) = 1 and the advantage telescopes exactly.
        let base = const_policy(1, 0.0);
        let hat = const_policy(1, 1.0);
        let cost = |x: &State| (x[0] * x[0]).min(1.0);
        let r = perf_difference_residual(
            &hat,
            &base,
            &Integrator,
            &cost,
            &DVector::zeros(1),
            1,
        )
        .unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn perf_difference_identity_random_instances() {
        struct Linear {
            a: DMatrix<f64>,
            b: DMatrix<f64>,
        }
        impl DynamicsModel for Linear {
            fn state_dim(&self) -> usize {
                2
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn step(&self, x: &State, u: &Control) -> State {
                &self.a * x + &self.b * u
            }
            fn control_bounds(&self) -> (Control, Control) {
                (DVector::from_vec(vec![-1e9]), DVector::from_vec(vec![1e9]))
            }
        }
        for seed in 0..5u64 {
            let sys = Linear {
                a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 0.8]),
                b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            };
            let base = Mlp::random(&[2, 4, 1], seed);
            let hat = Mlp::random(&[2, 4, 1], seed + 100);
            let cost = |x: &State| x.norm_squared();
            let x0 = DVector::from_vec(vec![0.3, -0.2]);
            let r = perf_difference_residual(&hat, &base, &sys, &cost, &x0, 5).unwrap();
            assert!(r < 1e-10, "residual {r} at seed {seed}");
        }
    }

    #[test]
    fn metrics_three_step_fixture() {
        let run = RunSeries {
            speed: vec![8.0, 6.0, 8.0],
            distance: vec![0.0, 1.0, 0.0],
        };
        let m = table1_metrics(&[run]);
        assert_relative_eq!(m.avg_speed, 22.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(m.lowest_speed, 6.0);
        assert_relative_eq!(m.total_steps, 3.0);
        // Speed changes are (-2, +2): zero mean, population std 2.
        assert_relative_eq!(m.std_speed_change, 2.0, epsilon = 1e-12);
        assert_relative_eq!(m.var_speed, 8.0 / 9.0, epsilon = 1e-12);
        assert_relative_eq!(m.avg_distance, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_permutation_invariant() {
        let a = RunSeries { speed: vec![1.0, 2.0, 3.0], distance: vec![0.1, 0.2, 0.3] };
        let b = RunSeries { speed: vec![5.0, 5.0], distance: vec![0.0, 0.4] };
        let c = RunSeries { speed: vec![2.0, 9.0, 4.0, 1.0], distance: vec![0.5; 4] };
        let m1 = table1_metrics(&[a.clone(), b.clone(), c.clone()]);
        let m2 = table1_metrics(&[c, a, b]);
        assert_relative_eq!(m1.avg_speed, m2.avg_speed);
        assert_relative_eq!(m1.var_speed, m2.var_speed);
        assert_relative_eq!(m1.std_distance_change, m2.std_distance_change);
        assert_relative_eq!(m1.total_steps, m2.total_steps);
    }

    #[test]
    fn goal_metrics_basic() {
        let g = goal_metrics(&[(100, true, 0.01), (300, false, 0.05), (120, true, 0.015)]);
        assert_relative_eq!(g.goal_rate, 2.0 / 3.0);
        assert_relative_eq!(g.mean_steps_to_goal, 110.0);
        assert_relative_eq!(g.mean_terminal_speed, 0.075 / 3.0 * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degradation_audit_paired() {
        let eps = EpsilonEstimate { eps1: 0.1, eps2: 0.0, eps3: 0.0, runs: 4 };
        let audit =
            degradation_audit(&[1.0, 2.0, 3.0, 4.0], &[1.1, 2.0, 3.2, 4.1], &eps, 10).unwrap();
        assert_relative_eq!(audit.mean_degradation, 0.1, epsilon = 1e-12);
        assert!(audit.within_bound);
        assert!(audit.assumption_unchecked);
    }
}
