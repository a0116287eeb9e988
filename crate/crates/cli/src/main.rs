//! `qnode`: runs the training experiments, gradient self-checks and scaling
//! studies, writing CSV series and JSON summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qnode_core::adjoint::ShotBudget;
use qnode_core::checks::{grad_check_suite, quadrature_scaling, shot_scaling, state_prep_check, GradCheckSettings, ScalingSeries};
use qnode_core::stats::median;
use qnode_core::train::{drive_mismatch, drive_samples, replicate_seed, train, ExperimentConfig, Task, TrainingRun};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "qnode", version, about = "Quantum neural ODE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-qubit state preparation.
    StatePrep(TrainArgs),
    /// Hamiltonian learning from input/output state pairs.
    HamLearn(TrainArgs),
    /// Hamiltonian learning from one-site Pauli expectation data.
    ObsLearn(TrainArgs),
    /// Decay-rate learning through the Schrödingerised dilation.
    OdeLearn(TrainArgs),
    /// Circuit gradient vs exact adjoint integral vs finite differences.
    GradCheck(GradCheckArgs),
    /// Empirical convergence in shots and in quadrature grid size.
    ScalingStudy(ScalingArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment JSON: one config, or {"runs": [{"name": ..., ...}, ...]}.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    replicates: u64,
    /// Positive integer or `inf`; overrides every run's shot budget.
    #[arg(long)]
    shots: Option<ShotBudget>,
    /// Overrides every run's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Fill the elapsed_ms column (makes CSVs machine dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1001)]
    grid_points: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Shots,
    Grid,
    Both,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    sweep: Sweep,
    /// Repeated estimates per shot count.
    #[arg(long, default_value_t = 40)]
    repeats: usize,
}

#[derive(Deserialize)]
struct NamedRun {
    name: String,
    #[serde(flatten)]
    config: ExperimentConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Suite { runs: Vec<NamedRun> },
    Single(Box<ExperimentConfig>),
}

const DEFAULT_STATE_PREP: &str = include_str!("../../../configs/fig2_state_prep.json");
const DEFAULT_HAM_LEARN: &str = include_str!("../../../configs/fig3_ham_learn.json");
const DEFAULT_OBS_LEARN: &str = include_str!("../../../configs/fig5a_obs_learn.json");
const DEFAULT_ODE_LEARN: &str = include_str!("../../../configs/ode_decay.json");

fn load_runs(task: Task, path: Option<&Path>) -> Result<Vec<NamedRun>> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => match task {
            Task::StatePrep => DEFAULT_STATE_PREP,
            Task::HamLearn => DEFAULT_HAM_LEARN,
            Task::ObsLearn => DEFAULT_OBS_LEARN,
            Task::OdeLearn => DEFAULT_ODE_LEARN,
        }
        .to_string(),
    };
    let runs = match serde_json::from_str::<ConfigFile>(&text).context("parsing experiment config")? {
        ConfigFile::Suite { runs } => runs,
        ConfigFile::Single(config) => vec![NamedRun {
            name: task.to_string(),
            config: *config,
        }],
    };
    if runs.is_empty() {
        bail!("config has no runs");
    }
    for run in &runs {
        if run.config.task != task {
            bail!("run {:?} is a {} experiment, not {}", run.name, run.config.task, task);
        }
        run.config.validate().with_context(|| format!("run {:?}", run.name))?;
    }
    Ok(runs)
}

#[derive(Serialize)]
struct ReplicateSummary {
    replicate: u64,
    seed: u64,
    final_theta: Vec<f64>,
    target_theta: Vec<f64>,
    final_loss: f64,
    final_test_error: Option<f64>,
    /// `max_t |f_θ(t) − f_target(t)|` on `[0, 2]` for time-dependent drives.
    #[serde(skip_serializing_if = "Option::is_none")]
    drive_mismatch: Option<f64>,
    wall_time_ms: f64,
}

/// Per-iteration median, minimum and maximum test error over replicates,
/// on the rows where every replicate evaluated it.
fn band_csv(runs: &[TrainingRun]) -> String {
    let mut out = String::from("iteration,median_test_error,min_test_error,max_test_error\n");
    let rows = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    for i in 0..rows {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| r.records[i].test_error).collect();
        if let Some(vals) = vals {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("{},{},{},{}\n", runs[0].records[i].iteration, median(&vals), lo, hi));
        }
    }
    out
}

fn run_training(task: Task, args: &TrainArgs) -> Result<bool> {
    let runs = load_runs(task, args.config.as_deref())?;
    if args.replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    for run in runs {
        let mut base = run.config;
        if let Some(seed) = args.seed {
            base.seed = seed;
        }
        if let Some(shots) = args.shots {
            base.shots = shots;
        }
        if let Some(n) = args.iterations {
            base.iterations = n;
        }
        let configs: Vec<ExperimentConfig> = (0..args.replicates)
            .map(|r| ExperimentConfig {
                seed: replicate_seed(base.seed, r),
                ..base.clone()
            })
            .collect();
        let results: Vec<TrainingRun> = configs
            .par_iter()
            .map(|cfg| train(cfg).map_err(anyhow::Error::from))
            .collect::<Result<_>>()
            .with_context(|| format!("run {:?}", run.name))?;

        let dir = args.out.join(&run.name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut replicates = Vec::with_capacity(results.len());
        for (r, (cfg, result)) in configs.iter().zip(&results).enumerate() {
            fs::write(dir.join(format!("replicate_{r}.csv")), result.to_csv(args.timing))?;
            if let Some(samples) = drive_samples(cfg, &result.final_theta, 201)? {
                let mut text = String::from("t,learned,target\n");
                for (t, a, b) in samples {
                    text.push_str(&format!("{t},{a},{b}\n"));
                }
                fs::write(dir.join(format!("drive_{r}.csv")), text)?;
            }
            replicates.push(ReplicateSummary {
                replicate: r as u64,
                seed: cfg.seed,
                final_theta: result.final_theta.clone(),
                target_theta: result.target_theta.clone(),
                final_loss: result.records.last().map(|x| x.loss).unwrap_or(f64::NAN),
                final_test_error: result.final_test_error(),
                drive_mismatch: drive_mismatch(cfg, &result.final_theta)?,
                wall_time_ms: result.wall_time_ms,
            });
        }
        fs::write(dir.join("band.csv"), band_csv(&results))?;
        let finals: Vec<f64> = replicates.iter().filter_map(|r| r.final_test_error).collect();
        let median_error = median(&finals);
        let summary = json!({
            "name": run.name,
            "config": base,
            "replicates": replicates,
            "median_final_test_error": median_error,
        });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{}: median final test error {median_error:.3e} over {} replicates -> {}", run.name, finals.len(), dir.display());
    }
    Ok(true)
}

fn run_grad_check(args: &GradCheckArgs) -> Result<bool> {
    if args.grid_points < 2 {
        bail!("--grid-points must be at least 2");
    }
    let settings = GradCheckSettings {
        grid_points: args.grid_points,
        fd_step: 1e-5,
        tolerance: args.tolerance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    // the origin, the solution [0, π/4, 0], and one random point
    let state_prep_points = [vec![0.0; 3], vec![0.0, std::f64::consts::FRAC_PI_4, 0.0], vec![0.4, -0.3, 0.7]];
    let state_prep = state_prep_points
        .iter()
        .map(|theta| state_prep_check(theta, &settings, &mut rng))
        .collect::<qnode_core::Result<Vec<_>>>()?;
    let instances = grad_check_suite(args.instances, &settings, &mut rng)?;
    let worst = |f: fn(&qnode_core::checks::GradCheckInstance) -> f64| instances.iter().chain(&state_prep).map(f).fold(0.0, f64::max);
    let all_pass = instances.iter().chain(&state_prep).all(|i| i.pass);
    let report = json!({
        "settings": settings,
        "all_pass": all_pass,
        "state_prep": state_prep,
        "max_circuit_vs_oracle": worst(|i| i.circuit_vs_oracle),
        "max_circuit_vs_fd": worst(|i| i.circuit_vs_fd),
        "max_oracle_vs_fd": worst(|i| i.oracle_vs_fd),
        "instances": instances,
    });
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("grad_check.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "grad-check: {} random instances and {} state-prep points, {} -> {}",
        instances.len(),
        state_prep.len(),
        if all_pass { "PASS" } else { "FAIL" },
        path.display()
    );
    Ok(all_pass)
}

#[derive(Serialize)]
struct SweepReport {
    sweep: &'static str,
    expected_slope: f64,
    tolerance: f64,
    series: Vec<ScalingSeries>,
    mean_slope: f64,
    pass: bool,
}

impl SweepReport {
    fn new(sweep: &'static str, expected_slope: f64, tolerance: f64, series: Vec<ScalingSeries>) -> Self {
        let mean_slope = series.iter().map(|s| s.slope).sum::<f64>() / series.len() as f64;
        let pass = series.iter().all(|s| (s.slope - expected_slope).abs() <= tolerance);
        Self {
            sweep,
            expected_slope,
            tolerance,
            series,
            mean_slope,
            pass,
        }
    }
}

fn run_scaling(args: &ScalingArgs) -> Result<bool> {
    let mut reports = Vec::new();
    if matches!(args.sweep, Sweep::Shots | Sweep::Both) {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let series = shot_scaling(&[100, 1_000, 10_000, 100_000], args.repeats, &mut rng)?;
        reports.push(SweepReport::new("shots", -0.5, 0.1, series));
    }
    if matches!(args.sweep, Sweep::Grid | Sweep::Both) {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let series = quadrature_scaling(&[10, 20, 40, 80, 160], &mut rng)?;
        reports.push(SweepReport::new("grid", -2.0, 0.2, series));
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("scaling_study.json");
    fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    for r in &reports {
        let slopes: Vec<String> = r.series.iter().map(|s| format!("{}: {:.3}", s.label, s.slope)).collect();
        println!(
            "{} sweep: slopes [{}], expected {} ± {} -> {}",
            r.sweep,
            slopes.join(", "),
            r.expected_slope,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    println!("report -> {}", path.display());
    Ok(reports.iter().all(|r| r.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::StatePrep(a) => run_training(Task::StatePrep, a),
        Command::HamLearn(a) => run_training(Task::HamLearn, a),
        Command::ObsLearn(a) => run_training(Task::ObsLearn, a),
        Command::OdeLearn(a) => run_training(Task::OdeLearn, a),
        Command::GradCheck(a) => run_grad_check(a),
        Command::ScalingStudy(a) => run_scaling(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
