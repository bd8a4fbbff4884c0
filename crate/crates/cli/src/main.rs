//! Config-driven experiment runner: train initial policies by behavioral
//! cloning, run both repair algorithms, evaluate with or without the safety
//! controller, and audit the analytical identities. Every command is
//! deterministic given (config, seed).
//!
//! Exit codes: 0 success, 1 method failure (repair did not converge, audit
//! identity violated, I/O error), 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use policy_repair_core::analysis::{
    estimate_epsilons, goal_metrics, perf_difference_residual, table1_metrics, theorem1_bound,
};
use policy_repair_core::csvio;
use policy_repair_core::envs::{Environment, LaneKeepEnv, MountainCarEnv};
use policy_repair_core::experiment::{
    behavior_clone, eval_with_sc, eval_without_sc, lane_series, mc_goal_stats,
};
use policy_repair_core::mpsc::{overhead_report, SafetyController};
use policy_repair_core::policy::{FitConfig, Mlp};
use policy_repair_core::repair::{
    min_dev_repair, naive_repair, RepairConfig, RetrainMode, SynthesisConfig, Termination,
};
use policy_repair_core::seeding::{self, tags};
use policy_repair_core::trajopt::{
    constrained_ilqr, PenaltyConfig, StageCost, TrustRegion,
};
use policy_repair_core::types::{rollout, Control, DynamicsModel, State, TraceSet};

#[derive(Parser)]
#[command(name = "policy-repair", version, about = "Safety-screened policy repair experiments")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Behavior-clone the scripted expert into the initial policy.
    TrainInitial,
    /// Repair the initial policy from safety-controller interventions.
    Repair {
        /// naive: retrain on screened controls; mindev: trajectory synthesis.
        #[arg(long, value_parser = ["naive", "mindev"])]
        algorithm: String,
        /// Policy file to repair (default: <out>/initial_policy.mlp).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Roll a policy out on the evaluation seeds and write metric CSVs.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        /// Screen every step through the safety controller.
        #[arg(long)]
        with_sc: bool,
        /// Evaluate on the patch-free lane (generalization probe); ignored
        /// for mountain car.
        #[arg(long)]
        without_patch: bool,
    },
    /// Verify the performance-difference identity and, given a policy,
    /// intervention-rate estimates and the degradation bound inputs.
    Audit {
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Dump the iterate log of one feasibility solve to iterates.csv.
        #[arg(long)]
        dump_iterates: bool,
    },
    /// Print the version and exit.
    Version,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    environment: EnvSection,
    policy: PolicySection,
    training: TrainingSection,
    repair: RepairSection,
    evaluation: EvalSection,
    run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvSection {
    name: String,
    sc_horizon: Option<usize>,
    episode_cap: Option<usize>,
    // Lane-only geometry overrides.
    radius: Option<f64>,
    half_width: Option<f64>,
    patch_start_deg: Option<f64>,
    patch_end_deg: Option<f64>,
    traction_loss: Option<bool>,
    // Mountain-car-only override.
    init_pos: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySection {
    hidden: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSection {
    episodes: usize,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    #[serde(default)]
    weight_decay: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepairSection {
    gamma_size: usize,
    n1: usize,
    n2: usize,
    epsilon_j: f64,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    delta_x: f64,
    window: Option<usize>,
    /// "perturbed-pairs" (default) or "least-squares".
    #[serde(default)]
    retrain: Option<String>,
    #[serde(default)]
    ridge: Option<f64>,
    #[serde(default)]
    delta_theta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    rollouts: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seed: u64,
    out_dir: PathBuf,
}

/// Either benchmark, concrete so lane-specific reporting stays available.
enum Bench {
    Lane(LaneKeepEnv),
    MountainCar(MountainCarEnv),
}

impl Bench {
    fn env(&self) -> &dyn Environment {
        match self {
            Bench::Lane(e) => e,
            Bench::MountainCar(e) => e,
        }
    }
}

struct Experiment {
    bench: Bench,
    cfg: ConfigFile,
    seed: u64,
    out_dir: PathBuf,
}

/// Errors that indicate a bad invocation or config (exit 2) as opposed to a
/// method that ran and failed (exit 1).
enum CliError {
    Usage(String),
    Failure(String),
}

impl From<policy_repair_core::types::CoreError> for CliError {
    fn from(e: policy_repair_core::types::CoreError) -> Self {
        CliError::Failure(e.to_string())
    }
}

fn load_experiment(cli: &Cli) -> Result<Experiment, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;

    let bench = match cfg.environment.name.as_str() {
        "lane_keep" => {
            let mut env = LaneKeepEnv::default();
            if let Some(r) = cfg.environment.radius {
                env.phi.radius = r;
            }
            if let Some(w) = cfg.environment.half_width {
                env.phi.half_width = w;
            }
            if let (Some(a), Some(b)) =
                (cfg.environment.patch_start_deg, cfg.environment.patch_end_deg)
            {
                env.patch = Some((a.to_radians(), b.to_radians()));
            }
            if cfg.environment.traction_loss == Some(false) {
                env.patch = None;
            }
            if let Some(c) = cfg.environment.episode_cap {
                env.episode_cap = c;
            }
            if let Some(t) = cfg.environment.sc_horizon {
                env.sc_horizon = t;
            }
            Bench::Lane(env)
        }
        "mountain_car" => {
            let mut env = MountainCarEnv::default();
            if let Some(c) = cfg.environment.episode_cap {
                env.episode_cap = c;
            }
            if let Some(t) = cfg.environment.sc_horizon {
                env.sc_horizon = t;
            }
            if let Some([a, b]) = cfg.environment.init_pos {
                env.init_pos = (a, b);
            }
            Bench::MountainCar(env)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown environment {other:?} (expected lane_keep or mountain_car)"
            )))
        }
    };

    let seed = cli.seed.unwrap_or(cfg.run.seed);
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    Ok(Experiment { bench, cfg, seed, out_dir })
}

impl Experiment {
    fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.cfg.training.learning_rate,
            batch_size: self.cfg.training.batch_size,
            epochs: self.cfg.training.epochs,
            seed: self.seed,
            weight_decay: self.cfg.training.weight_decay,
            trust_region: None,
        }
    }

    fn repair_config(&self) -> Result<RepairConfig, CliError> {
        let r = &self.cfg.repair;
        let retrain = match r.retrain.as_deref() {
            None | Some("perturbed-pairs") => RetrainMode::PerturbedPairs,
            Some("least-squares") => RetrainMode::LeastSquares,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown retrain mode {other:?} (expected perturbed-pairs or least-squares)"
                )))
            }
        };
        Ok(RepairConfig {
            gamma_size: r.gamma_size,
            n1: r.n1,
            n2: r.n2,
            epsilon_j: r.epsilon_j,
            fit: FitConfig {
                learning_rate: r.learning_rate,
                batch_size: r.batch_size,
                epochs: r.epochs,
                seed: self.seed,
                weight_decay: 0.0,
                trust_region: None,
            },
            synthesis: SynthesisConfig {
                delta_x: r.delta_x,
                window: r.window,
                penalty: PenaltyConfig::default(),
            },
            retrain,
            ridge: r.ridge.unwrap_or(1e-6),
            delta_theta: r.delta_theta,
            seed: self.seed,
        })
    }

    fn safety_controller<'a>(&self, env: &'a dyn Environment) -> SafetyController<'a> {
        SafetyController::new(env.dynamics(), env.phi(), env.sc_horizon())
            .with_margin(env.sc_margin())
    }

    fn initial_policy_path(&self) -> PathBuf {
        self.out_dir.join("initial_policy.mlp")
    }
}

fn load_policy(path: &Path) -> Result<Mlp, CliError> {
    Mlp::load(path).map_err(|e| CliError::Usage(format!("cannot load {}: {e}", path.display())))
}

fn cmd_train_initial(exp: &Experiment) -> Result<(), CliError> {
    // Lane demonstrations come from the patch-free ring: the expert's
    // demonstrated behavior is clean tracking, the hazard stays unseen.
    let (policy, report) = match &exp.bench {
        Bench::Lane(env) => {
            let clean = env.clone().without_traction_loss();
            behavior_clone(
                &clean,
                &exp.cfg.policy.hidden,
                exp.cfg.training.episodes,
                &exp.fit_config(),
                exp.seed,
            )?
        }
        Bench::MountainCar(env) => behavior_clone(
            env,
            &exp.cfg.policy.hidden,
            exp.cfg.training.episodes,
            &exp.fit_config(),
            exp.seed,
        )?,
    };
    let path = exp.initial_policy_path();
    policy.save(&path)?;
    println!(
        "trained initial policy: loss {:.6} -> {:.6} ({} epochs accepted), saved to {}",
        report.initial_loss,
        report.final_loss,
        report.epochs_accepted,
        path.display()
    );
    Ok(())
}

fn cmd_repair(exp: &Experiment, algorithm: &str, policy: Option<&Path>) -> Result<(), CliError> {
    let default_path = exp.initial_policy_path();
    let policy = load_policy(policy.unwrap_or(&default_path))?;
    let env = exp.bench.env();
    let sc = exp.safety_controller(env);
    let cfg = exp.repair_config()?;

    let (repaired, records, failed) = match algorithm {
        "naive" => {
            let out = naive_repair(&policy, env, &sc, &cfg, 0)?;
            println!("naive repair interventions per round: {:?}", out.interventions_history);
            let records: Vec<_> = out
                .interventions_history
                .iter()
                .enumerate()
                .map(|(i, n)| policy_repair_core::repair::IterationRecord {
                    iteration: i,
                    j: f64::NAN,
                    interventions: *n,
                    status: "naive",
                })
                .collect();
            (out.policy, records, !out.converged)
        }
        "mindev" => {
            let (repaired, report) = min_dev_repair(&policy, env, &sc, &cfg)?;
            for r in &report.records {
                println!(
                    "iter {} J {:.6} interventions {} ({})",
                    r.iteration, r.j, r.interventions, r.status
                );
            }
            println!(
                "termination {:?}, synthesis fallbacks {}",
                report.termination, report.synthesis_fallbacks
            );
            csvio::write_repair_summary(
                &exp.out_dir.join("repair_mindev_summary.txt"),
                &report,
            )?;
            let failed = report.termination == Termination::NaiveRepairFailed;
            (repaired, report.records, failed)
        }
        other => return Err(CliError::Usage(format!("unknown algorithm {other:?}"))),
    };

    let policy_path = exp.out_dir.join(format!("repaired_{algorithm}.mlp"));
    repaired.save(&policy_path)?;
    csvio::write_repair_records(
        &exp.out_dir.join(format!("repair_{algorithm}.csv")),
        &records,
    )?;
    println!("saved repaired policy to {}", policy_path.display());
    if failed {
        return Err(CliError::Failure(format!("{algorithm} repair did not converge")));
    }
    Ok(())
}

fn cmd_evaluate(
    exp: &Experiment,
    policy_path: &Path,
    with_sc: bool,
    without_patch: bool,
) -> Result<(), CliError> {
    let policy = load_policy(policy_path)?;
    let patch_free;
    let bench = if without_patch {
        match &exp.bench {
            Bench::Lane(env) => {
                patch_free = Bench::Lane(env.clone().without_traction_loss());
                &patch_free
            }
            other => other,
        }
    } else {
        &exp.bench
    };
    let env = bench.env();
    let n = exp.cfg.evaluation.rollouts;

    let trajectories;
    if with_sc {
        let runs = eval_with_sc(&policy, env, n, exp.seed, 0)?;
        let traces = TraceSet { runs: runs.iter().map(|(r, _)| r.clone()).collect() };
        let interventions = traces.total_interventions();
        let eps = estimate_epsilons(&traces);
        println!(
            "{n} screened rollouts: {interventions} interventions, eps1 {} eps2 {} eps3 {}",
            eps.eps1, eps.eps2, eps.eps3
        );
        csvio::write_trace_set(&exp.out_dir.join("traces.csv"), &traces)?;
        let all_decisions: Vec<_> =
            runs.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
        csvio::write_decision_trace(&exp.out_dir.join("decisions.csv"), &all_decisions)?;
        csvio::write_overhead_report(
            &exp.out_dir.join("overhead.csv"),
            &overhead_report(&all_decisions, env.sc_horizon()),
        )?;
        trajectories = traces.runs.into_iter().map(|r| r.trajectory).collect::<Vec<_>>();
    } else {
        trajectories = eval_without_sc(&policy, env, n, exp.seed, 0)?;
        println!("{n} unscreened rollouts");
    }

    match bench {
        Bench::Lane(lane) => {
            let series: Vec<_> = trajectories.iter().map(|t| lane_series(lane, t)).collect();
            let m = table1_metrics(&series);
            println!(
                "avg speed {:.3}, avg distance {:.4}, total steps {:.1}, var speed {:.4}",
                m.avg_speed, m.avg_distance, m.total_steps, m.var_speed
            );
            csvio::write_metrics(
                &exp.out_dir.join("metrics.csv"),
                &[("evaluation".to_string(), m)],
            )?;
            csvio::write_polyline(
                &exp.out_dir.join("centerline.csv"),
                &lane.centerline(360),
            )?;
        }
        Bench::MountainCar(mc) => {
            let stats: Vec<_> = trajectories.iter().map(|t| mc_goal_stats(mc, t)).collect();
            let g = goal_metrics(&stats);
            println!(
                "goal rate {:.3}, mean steps {:.1}, mean terminal speed {:.4}",
                g.goal_rate, g.mean_steps_to_goal, g.mean_terminal_speed
            );
            let body = format!(
                "goal_rate,mean_steps_to_goal,mean_terminal_speed\n{},{},{}\n",
                g.goal_rate, g.mean_steps_to_goal, g.mean_terminal_speed
            );
            fs::write(exp.out_dir.join("metrics.csv"), body)
                .map_err(|e| CliError::Failure(e.to_string()))?;
        }
    }
    Ok(())
}

/// Randomized linear system used by the identity audit.
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
        (
            DVector::from_element(self.b.ncols(), -1e9),
            DVector::from_element(self.b.ncols(), 1e9),
        )
    }
}

fn cmd_audit(exp: &Experiment, policy: Option<&Path>, dump_iterates: bool) -> Result<(), CliError> {
    use rand::Rng;

    // Performance-difference identity on randomized stable linear systems.
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = seeding::rng(exp.seed, tags::AUDIT, i);
        let sys = LinearSystem {
            a: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.6..0.6)),
            b: DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let base = Mlp::random(&[2, 4, 1], seeding::derive(exp.seed, tags::AUDIT, 1000 + i));
        let hat = Mlp::random(&[2, 4, 1], seeding::derive(exp.seed, tags::AUDIT, 2000 + i));
        let cost = |x: &State| x.norm_squared();
        let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
        let h = 1 + (i % 5) as usize;
        let r = perf_difference_residual(&hat, &base, &sys, &cost, &x0, h)?;
        worst = worst.max(r);
    }
    println!("performance-difference identity: max residual {worst:.3e} over 100 instances");
    if worst >= 1e-10 {
        return Err(CliError::Failure(format!(
            "identity residual {worst:.3e} exceeds 1e-10"
        )));
    }

    if let Some(path) = policy {
        let policy = load_policy(path)?;
        let env = exp.bench.env();
        let runs = eval_with_sc(&policy, env, exp.cfg.evaluation.rollouts, exp.seed, 0)?;
        let traces = TraceSet { runs: runs.into_iter().map(|(r, _)| r).collect() };
        let eps = estimate_epsilons(&traces);
        let h = env.sc_horizon();
        println!(
            "intervention rates over {} runs: eps1 {} eps2 {} eps3 {}; degradation bound (h = {h}): {:.4}",
            eps.runs,
            eps.eps1,
            eps.eps2,
            eps.eps3,
            theorem1_bound(&eps, h)
        );
    }

    if dump_iterates {
        let env = exp.bench.env();
        let mut rng = seeding::rng(exp.seed, tags::INIT_STATE, 0);
        let x0 = env.sample_initial(&mut rng);
        let zero = Mlp::zeros(&[env.dynamics().state_dim(), env.dynamics().control_dim()]);
        let nominal = rollout(&zero, env.dynamics(), &x0, env.sc_horizon())?;
        let objective = vec![
            StageCost::zeros(env.dynamics().state_dim(), env.dynamics().control_dim());
            env.sc_horizon() + 1
        ];
        let sol = constrained_ilqr(
            &nominal,
            &objective,
            env.dynamics(),
            env.phi(),
            &PenaltyConfig::default(),
            &TrustRegion::loose(),
            None,
        )?;
        let path = exp.out_dir.join("iterates.csv");
        csvio::write_iterate_log(&path, &sol.log)?;
        println!(
            "feasibility solve from a sampled initial state: status {:?}, {} iterates logged to {}",
            sol.status,
            sol.log.len(),
            path.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::Version) {
        println!("policy-repair {}", env!("CARGO_PKG_VERSION"));
        return ExitCode::SUCCESS;
    }
    let exp = match load_experiment(&cli) {
        Ok(e) => e,
        Err(CliError::Usage(m)) | Err(CliError::Failure(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::TrainInitial => cmd_train_initial(&exp),
        Command::Repair { algorithm, policy } => {
            cmd_repair(&exp, algorithm, policy.as_deref())
        }
        Command::Evaluate { policy, with_sc, without_patch } => {
            cmd_evaluate(&exp, policy, *with_sc, *without_patch)
        }
        Command::Audit { policy, dump_iterates } => {
            cmd_audit(&exp, policy.as_deref(), *dump_iterates)
        }
        Command::Version => unreachable!(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
