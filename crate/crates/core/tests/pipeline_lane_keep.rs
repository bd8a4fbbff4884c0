//! End-to-end lane keeping pipeline: clone the pure-pursuit expert, show the
//! traction-loss patch makes it leave the lane, screen it, and repair it.

use policy_repair_core::analysis::table1_metrics;
use policy_repair_core::envs::{Environment, LaneKeepEnv};
use policy_repair_core::experiment::{
    behavior_clone, control_mismatch, eval_with_sc, eval_without_sc, expert_dataset, lane_series,
};
use policy_repair_core::mpsc::SafetyController;
use policy_repair_core::policy::{FitConfig, Mlp};
use policy_repair_core::repair::{
    deviation_loss, min_dev_repair, naive_repair, RepairConfig, RetrainMode, SynthesisConfig,
    Termination,
};
use policy_repair_core::trajopt::PenaltyConfig;
use policy_repair_core::types::{SafetyFn, TraceSet};

const SEED: u64 = 777;
const PHI_TOL: f64 = 1e-4;
const HALF_WIDTH: f64 = 0.9;

fn env() -> LaneKeepEnv {
    LaneKeepEnv::default()
}

fn bc_fit_config() -> FitConfig {
    FitConfig {
        learning_rate: 0.2,
        batch_size: 64,
        epochs: 600,
        seed: SEED,
        weight_decay: 0.0,
        trust_region: None,
    }
}

fn initial_policy(env: &LaneKeepEnv) -> Mlp {
    static CACHE: std::sync::OnceLock<Mlp> = std::sync::OnceLock::new();
    CACHE
        .get_or_init(|| {
            // Demonstrations come from the patch-free ring so the expert's
            // demonstrated behavior is clean tracking.
            let clean = env.clone().without_traction_loss();
            let (policy, report) =
                behavior_clone(&clean, &[32, 32], 20, &bc_fit_config(), SEED).unwrap();
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
        gamma_size: 10,
        n1: 10,
        n2: 3,
        epsilon_j: 0.001,
        fit: FitConfig {
            learning_rate: 0.1,
            batch_size: 64,
            epochs: 150,
            seed: SEED,
            weight_decay: 0.0,
            trust_region: None,
        },
        synthesis: SynthesisConfig {
            delta_x: 1.0,
            window: Some(60),
            penalty: PenaltyConfig::default(),
        },
        retrain: RetrainMode::PerturbedPairs,
        ridge: 1e-6,
        delta_theta: None,
        seed: SEED,
    }
}

#[test]
fn cloned_policy_tracks_but_slides_off_in_patch() {
    let env = env();
    let policy = initial_policy(&env);
    let clean = env.clone().without_traction_loss();
    let data = expert_dataset(&clean, 5, SEED + 1);
    let mismatch = control_mismatch(&policy, &data, 0.5);
    eprintln!("[bc] mismatch {mismatch:.4}");
    assert!(mismatch < 0.05);

    // On the patch-free ring the clone finishes inside the lane.
    let clean_runs = eval_without_sc(&policy, &clean, 5, SEED, 0).unwrap();
    for t in &clean_runs {
        let worst = t.states().map(|x| env.phi.phi(x)).fold(f64::NEG_INFINITY, f64::max);
        eprintln!("[bc] clean worst phi {worst:.4}, steps {}", t.horizon());
        assert!(worst <= 0.0, "clone leaves the lane even without the patch");
        assert!(clean.is_terminal(&t.steps.last().unwrap().0), "clone did not finish the ring");
    }

    // With the patch it goes straight and leaves the lane.
    let runs = eval_without_sc(&policy, &env, 10, SEED, 100).unwrap();
    let violated = runs
        .iter()
        .filter(|t| t.states().any(|x| env.phi.phi(x) > PHI_TOL))
        .count();
    eprintln!("[bc] patch violations without screening: {violated}/10");
    assert!(violated >= 8, "traction loss should throw the clone off the lane");
}

#[test]
fn screening_keeps_lane_rollouts_safe() {
    let env = env();
    let policy = initial_policy(&env);
    let runs = eval_with_sc(&policy, &env, 20, SEED, 0).unwrap();
    let mut worst = f64::NEG_INFINITY;
    let mut interventions = 0;
    let mut inevitable = 0;
    for (run, decisions) in &runs {
        assert!(run.coherent());
        interventions += run.intervention_count();
        inevitable += decisions
            .iter()
            .filter(|d| d.kind == policy_repair_core::types::DecisionKind::Inevitable)
            .count();
        worst = worst.max(
            run.trajectory.states().map(|x| env.phi.phi(x)).fold(f64::NEG_INFINITY, f64::max),
        );
    }
    eprintln!("[sc] worst phi {worst:.5}, interventions {interventions}, inevitable {inevitable}");
    assert!(worst <= PHI_TOL, "screened lane rollout left the lane: phi {worst}");
    assert!(interventions > 0, "the patch should force interventions");
}

#[test]
fn repair_restores_lane_safety() {
    let env = env();
    let policy = initial_policy(&env);
    let sc = SafetyController::new(&env, &env.phi, env.sc_horizon).with_margin(env.sc_margin());
    let cfg = repair_config();

    let naive = naive_repair(&policy, &env, &sc, &cfg, 0).unwrap();
    eprintln!("[naive] interventions per round: {:?}", naive.interventions_history);
    assert!(naive.converged, "naive lane repair failed: {:?}", naive.interventions_history);

    let runs = eval_without_sc(&naive.policy, &env, 10, SEED, 2000).unwrap();
    let mut finished = 0;
    let mut worst = f64::NEG_INFINITY;
    for t in &runs {
        worst = worst.max(t.states().map(|x| env.phi.phi(x)).fold(f64::NEG_INFINITY, f64::max));
        if env.is_terminal(&t.steps.last().unwrap().0) {
            finished += 1;
        }
    }
    let series: Vec<_> = runs.iter().map(|t| lane_series(&env, t)).collect();
    let m = table1_metrics(&series);
    eprintln!(
        "[naive] worst phi {worst:.5}, finished {finished}/10, avg speed {:.2}, avg dist {:.3}",
        m.avg_speed, m.avg_distance
    );
    assert!(worst <= PHI_TOL, "naively repaired lane policy is unsafe: phi {worst}");
    assert!(finished >= 9, "repaired policy stopped finishing the ring");
}

#[test]
fn min_dev_repair_deviates_less_than_naive_on_lane() {
    let env = env();
    let policy = initial_policy(&env);
    let sc = SafetyController::new(&env, &env.phi, env.sc_horizon).with_margin(env.sc_margin());
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
    eprintln!(
        "[mindev] termination {:?}, fallbacks {}",
        report.termination, report.synthesis_fallbacks
    );
    assert!(matches!(
        report.termination,
        Termination::ConvergedJ | Termination::IterationCap
    ));

    let eval = eval_with_sc(&mindev, &env, 10, SEED, 9000).unwrap();
    let traces = TraceSet { runs: eval.iter().map(|(r, _)| r.clone()).collect() };
    assert_eq!(traces.total_interventions(), 0);
    let j_naive = deviation_loss(&policy, &naive.policy, &traces);
    let j_mindev = deviation_loss(&policy, &mindev, &traces);
    eprintln!("[mindev] J(naive) {j_naive:.5} J(mindev) {j_mindev:.5}");
    assert!(j_mindev <= j_naive);

    // Lane metrics stay sensible: speed above half the target, mean distance
    // within the half width.
    let runs = eval_without_sc(&mindev, &env, 10, SEED, 11000).unwrap();
    let series: Vec<_> = runs.iter().map(|t| lane_series(&env, t)).collect();
    let m = table1_metrics(&series);
    eprintln!("[mindev] avg speed {:.2}, avg distance {:.3}", m.avg_speed, m.avg_distance);
    assert!(m.avg_speed > 4.0);
    assert!(m.avg_distance < HALF_WIDTH);
}
