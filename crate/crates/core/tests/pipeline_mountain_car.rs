//! End-to-end mountain car pipeline: clone the unsafe expert, screen it,
//! repair it naively and minimally, and check the analytical claims.

use nalgebra::DVector;
use policy_repair_core::analysis::{estimate_epsilons, goal_metrics};
use policy_repair_core::envs::mountain_car::{GOAL_POS, SAFE_SPEED};
use policy_repair_core::envs::MountainCarEnv;
use policy_repair_core::experiment::{
    behavior_clone, control_mismatch, eval_with_sc, eval_without_sc, expert_dataset,
    mc_goal_stats,
};
use policy_repair_core::mpsc::SafetyController;
use policy_repair_core::policy::{FitConfig, Mlp};
use policy_repair_core::repair::{
    deviation_loss, min_dev_repair, naive_repair, RepairConfig, RetrainMode, SynthesisConfig,
    Termination,
};
use policy_repair_core::trajopt::PenaltyConfig;
use policy_repair_core::types::TraceSet;

const SEED: u64 = 12345;
const PHI_TOL: f64 = 1e-4;

fn env() -> MountainCarEnv {
    MountainCarEnv::default()
}

fn bc_fit_config() -> FitConfig {
    FitConfig {
        learning_rate: 0.2,
        batch_size: 64,
        epochs: 500,
        seed: SEED,
        weight_decay: 0.0,
        trust_region: None,
    }
}

fn initial_policy(env: &MountainCarEnv) -> Mlp {
    static CACHE: std::sync::OnceLock<Mlp> = std::sync::OnceLock::new();
    CACHE
        .get_or_init(|| {
            let (policy, report) =
                behavior_clone(env, &[16, 16], 40, &bc_fit_config(), SEED).unwrap();
            eprintln!(
                "[bc] loss {:.5} -> {:.5} ({} accepted / {} rejected epochs)",
                report.initial_loss,
                report.final_loss,
                report.epochs_accepted,
                report.epochs_rejected
            );
            policy
        })
        .clone()
}

fn repair_config() -> RepairConfig {
    RepairConfig {
        gamma_size: 20,
        n1: 10,
        n2: 5,
        epsilon_j: 0.001,
        fit: FitConfig {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 100,
            seed: SEED,
            weight_decay: 0.0,
            trust_region: None,
        },
        synthesis: SynthesisConfig {
            delta_x: 0.05,
            window: None,
            penalty: PenaltyConfig::default(),
        },
        retrain: RetrainMode::PerturbedPairs,
        ridge: 1e-6,
        delta_theta: None,
        seed: SEED,
    }
}

fn max_phi(env: &MountainCarEnv, traces: &TraceSet) -> f64 {
    traces
        .runs
        .iter()
        .flat_map(|r| r.trajectory.states())
        .map(|x| {
            use policy_repair_core::types::SafetyFn;
            env.phi.phi(x)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn cloned_policy_matches_expert_and_is_unsafe() {
    let env = env();
    let policy = initial_policy(&env);
    let data = expert_dataset(&env, 10, SEED + 1);
    let mismatch = control_mismatch(&policy, &data, 0.5);
    eprintln!("[bc] mismatch {mismatch:.4}");
    assert!(mismatch < 0.05, "cloned policy disagrees with expert on {mismatch:.3}");

    // Unscreened, the cloned policy crests the hill too fast.
    let runs = eval_without_sc(&policy, &env, 20, SEED, 0).unwrap();
    let unsafe_runs = runs
        .iter()
        .filter(|t| t.states().any(|x| x[0] >= GOAL_POS && x[1] > SAFE_SPEED + PHI_TOL))
        .count();
    eprintln!("[bc] unsafe runs without screening: {unsafe_runs}/20");
    assert!(unsafe_runs > 10, "initial policy should be unsafe by construction");
}

#[test]
fn screening_keeps_every_rollout_safe() {
    let env = env();
    let policy = initial_policy(&env);
    let runs = eval_with_sc(&policy, &env, 200, SEED, 0).unwrap();
    let mut worst = f64::NEG_INFINITY;
    let mut interventions = 0;
    for (run, _) in &runs {
        assert!(run.coherent());
        interventions += run.intervention_count();
        let set = TraceSet { runs: vec![run.clone()] };
        worst = worst.max(max_phi(&env, &set));
    }
    eprintln!("[sc] worst phi {worst:.6}, total interventions {interventions}");
    assert!(worst <= PHI_TOL, "screened rollout left the safe set: phi {worst}");
    assert!(interventions > 0, "screening should be exercised by the unsafe policy");
}

#[test]
fn naive_repair_reaches_zero_interventions() {
    let env = env();
    let policy = initial_policy(&env);
    let sc = SafetyController::new(&env, &env.phi, env.sc_horizon);
    let cfg = repair_config();
    let out = naive_repair(&policy, &env, &sc, &cfg, 0).unwrap();
    eprintln!("[naive] interventions per round: {:?}", out.interventions_history);
    assert!(out.converged, "naive repair did not converge: {:?}", out.interventions_history);
    assert!(*out.interventions_history.first().unwrap() > 0);
    assert_eq!(*out.interventions_history.last().unwrap(), 0);

    // The repaired policy is safe and still reaches the goal unscreened.
    let runs = eval_without_sc(&out.policy, &env, 50, SEED, 1000).unwrap();
    let stats: Vec<_> = runs.iter().map(|t| mc_goal_stats(&env, t)).collect();
    let g = goal_metrics(&stats);
    let worst = runs
        .iter()
        .flat_map(|t| t.states())
        .map(|x| {
            use policy_repair_core::types::SafetyFn;
            env.phi.phi(x)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    eprintln!(
        "[naive] goal rate {:.2}, mean steps {:.1}, terminal speed {:.4}, worst phi {:.6}",
        g.goal_rate, g.mean_steps_to_goal, g.mean_terminal_speed, worst
    );
    assert!(worst <= PHI_TOL, "naively repaired policy is unsafe: phi {worst}");
    assert!(g.goal_rate > 0.9, "repaired policy stopped reaching the goal");
}

#[test]
fn min_dev_repair_deviates_less_than_naive() {
    let env = env();
    let policy = initial_policy(&env);
    let sc = SafetyController::new(&env, &env.phi, env.sc_horizon);
    let cfg = repair_config();

    let naive = naive_repair(&policy, &env, &sc, &cfg, 0).unwrap();
    assert!(naive.converged);
    let (mindev, report) = min_dev_repair(&policy, &env, &sc, &cfg).unwrap();
    for r in &report.records {
        eprintln!(
            "[mindev] iter {} J {:.5} interventions {} ({})",
            r.iteration, r.j, r.interventions, r.status
        );
    }
    eprintln!("[mindev] termination {:?}", report.termination);
    assert!(matches!(
        report.termination,
        Termination::ConvergedJ | Termination::IterationCap
    ));

    // Both are zero-intervention policies; the minimally deviating one stays
    // closer to the original on common evaluation states.
    let eval = eval_with_sc(&mindev, &env, 20, SEED, 5000).unwrap();
    let traces = TraceSet { runs: eval.iter().map(|(r, _)| r.clone()).collect() };
    let eps = estimate_epsilons(&traces);
    eprintln!("[mindev] eps1 {} eps2 {} eps3 {}", eps.eps1, eps.eps2, eps.eps3);
    assert_eq!(traces.total_interventions(), 0, "min-dev policy still triggers screening");

    let j_naive = deviation_loss(&policy, &naive.policy, &traces);
    let j_mindev = deviation_loss(&policy, &mindev, &traces);
    eprintln!("[mindev] J(naive) {j_naive:.5} J(mindev) {j_mindev:.5}");
    assert!(
        j_mindev <= j_naive,
        "synthesis-based repair deviates more than naive ({j_mindev} > {j_naive})"
    );

    // Goal completion is retained.
    let runs = eval_without_sc(&mindev, &env, 50, SEED, 7000).unwrap();
    let stats: Vec<_> = runs.iter().map(|t| mc_goal_stats(&env, t)).collect();
    let g = goal_metrics(&stats);
    eprintln!("[mindev] goal rate {:.2} terminal speed {:.4}", g.goal_rate, g.mean_terminal_speed);
    assert!(g.goal_rate > 0.9);

    // Original-policy deviation: a zero-size sanity anchor. The original
    // deviates zero from itself.
    let x = DVector::from_vec(vec![-0.5, 0.0]);
    assert_eq!(policy.forward(&x), policy.forward(&x));
}
