//! `posafe`: dataset generation, training, rollouts, benchmarks, the order
//! ablation, timing, and poset inspection for the poset-safety pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 check failure (`--check`),
//! 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use posafe_core::composition::CombineMode;
use posafe_core::dynamics::Scenario;
use posafe_core::learner::{
    self, Checkpoint, Dataset, LearnerConfig, TrainState, CHECKPOINT_VERSION,
};
use posafe_core::sim::{
    self, AblationVariant, BenchPlan, MetricsReport, Policy, BASELINE_SLACK_WEIGHT,
};

/// Environment variable overriding the default output root directory.
const OUT_ROOT_ENV: &str = "POSAFE_OUT";

#[derive(Parser)]
#[command(
    name = "posafe",
    version,
    about = "Poset-structured safety composition: train, benchmark, inspect",
    disable_help_subcommand = true
)]
struct Cli {
    /// Force deterministic single-threaded execution (always on in this
    /// implementation; accepted for script compatibility).
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mixture,
    Hard,
    Gumbel,
}

impl From<ModeArg> for CombineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mixture => CombineMode::Mixture,
            ModeArg::Hard => CombineMode::Hard,
            ModeArg::Gumbel => CombineMode::Gumbel,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    PosafenetHard,
    PosafenetMixture,
    PosafenetGumbel,
    Expert,
    SimqpHard,
    SimqpSlack,
    Unprotected,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario: navigation, manipulation, driving2, driving4.
    #[arg(long, default_value = "navigation")]
    scenario: String,
    /// Master seed; all randomness derives from it deterministically.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $POSAFE_OUT or ./out, per scenario).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset (CSV + episode metadata).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of expert episodes to roll out.
        #[arg(long, default_value_t = 24)]
        episodes: usize,
    },
    /// Train the projection policy (and the unprotected baseline network).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset base path (as produced by gen-data); default
        /// <out>/dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Head count; defaults to the scenario's standard count.
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::Mixture)]
        mode: ModeArg,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Roll out one policy from a checkpoint and print its metrics.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::PosafenetHard)]
        policy: PolicyArg,
        #[arg(long, default_value_t = 10)]
        rollouts: usize,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        /// Disable execution noise.
        #[arg(long)]
        no_noise: bool,
    },
    /// Full benchmark table over the standard policy set.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value_t = 24)]
        episodes: usize,
        #[arg(long)]
        no_noise: bool,
        /// Verify the headline safety/feasibility properties; exit 2 on
        /// failure.
        #[arg(long)]
        check: bool,
    },
    /// Driving order-sensitivity ablation (fix/wrong order, hard, mixture).
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value_t = 24)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        check: bool,
    },
    /// Projection-vs-oracle timing table and head-count scaling.
    Timing {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        check: bool,
    },
    /// Print the scenario poset, its linear extensions, and a DOT Hasse
    /// diagram.
    Poset {
        #[command(flatten)]
        common: CommonArgs,
        /// Cap on the number of extensions listed.
        #[arg(long, default_value_t = 64)]
        limit: usize,
        /// Print the DOT diagram only.
        #[arg(long)]
        dot: bool,
    },
}

fn out_dir(common: &CommonArgs) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "out".into());
            Path::new(&root).join(&common.scenario)
        }
    }
}

fn scenario_for(common: &CommonArgs) -> Result<Scenario> {
    Scenario::by_name(&common.scenario)
        .with_context(|| format!("unknown scenario '{}'", common.scenario))
}

/// Reproducibility manifest written beside every command's outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    scenario: &'a str,
    seed: u64,
    params: serde_json::Value,
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn dataset_base(common: &CommonArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out_dir(common).join("dataset"))
}

fn checkpoint_path(common: &CommonArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out_dir(common).join("checkpoint.json"))
}

fn load_dataset(base: &Path) -> Result<Dataset> {
    Dataset::load(base).with_context(|| format!("loading dataset at {}", base.display()))
}

fn load_checkpoint(path: &Path, scenario: &Scenario) -> Result<Checkpoint> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.state.scenario != scenario.name() {
        bail!(
            "checkpoint trained for '{}', requested scenario '{}'",
            ck.state.scenario,
            scenario.name()
        );
    }
    Ok(ck)
}

fn build_policy<'a>(
    arg: PolicyArg,
    state: Option<&'a TrainState>,
    plain: Option<&'a learner::Mlp>,
) -> Result<Policy<'a>> {
    let need_state = || state.context("this policy needs a trained checkpoint");
    let need_plain =
        || plain.context("this policy needs the unprotected baseline network in the checkpoint");
    Ok(match arg {
        PolicyArg::PosafenetHard => {
            Policy::PoSafeNet { state: need_state()?, mode: CombineMode::Hard }
        }
        PolicyArg::PosafenetMixture => {
            Policy::PoSafeNet { state: need_state()?, mode: CombineMode::Mixture }
        }
        PolicyArg::PosafenetGumbel => {
            Policy::PoSafeNet { state: need_state()?, mode: CombineMode::Gumbel }
        }
        PolicyArg::Expert => Policy::Expert,
        PolicyArg::SimqpHard => Policy::SimQp { nominal: need_plain()?, slack: None },
        PolicyArg::SimqpSlack => {
            Policy::SimQp { nominal: need_plain()?, slack: Some(BASELINE_SLACK_WEIGHT) }
        }
        PolicyArg::Unprotected => Policy::Unprotected { nominal: need_plain()? },
    })
}

fn print_report(r: &MetricsReport) {
    println!(
        "{}: rollouts={} safety_min={:.4} safety_mean={:.4} feasible={} qp_succ={:.1}% top_safety={} audit_viol={}",
        r.policy,
        r.n_rollouts,
        r.safety_min,
        r.safety_mean,
        r.feasibility,
        r.qp_success_pct,
        r.top_safety_guarantee,
        r.audit_violations
    );
    if r.phi_viol_mean.is_finite() {
        println!("  phi viol mean/max = {:.6}/{:.6}", r.phi_viol_mean, r.phi_viol_max);
    }
    if r.crash_pct.is_finite() {
        println!(
            "  pass={:.1}% crash={:.1}% lane_viol min/mean={:.3}/{:.3} out_of_lane={:.3} rot={:.3}",
            r.pass_pct, r.crash_pct, r.lane_viol_min, r.lane_viol_mean, r.time_out_of_lane, r.rot_viol
        );
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { common, episodes } => {
            let scenario = scenario_for(&common)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let (dataset, report) = sim::generate_dataset(&scenario, episodes, common.seed);
            let base = dir.join("dataset");
            dataset.save(&base)?;
            write_manifest(
                &dir,
                &Manifest {
                    command: "gen-data",
                    scenario: scenario.name(),
                    seed: common.seed,
                    params: serde_json::json!({ "episodes": episodes }),
                },
            )?;
            if report.samples == 0 {
                eprintln!("warning: dataset is empty (horizon 0 or all steps infeasible)");
            }
            println!(
                "wrote {} samples over {} episodes to {} ({} infeasible expert steps dropped)",
                report.samples,
                report.episodes,
                base.with_extension("csv").display(),
                report.infeasible_dropped
            );
            Ok(0)
        }
        Command::Train {
            common,
            dataset,
            heads,
            mode,
            epochs,
            batch_size,
            learning_rate,
            temperature,
        } => {
            let scenario = scenario_for(&common)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let ds = load_dataset(&dataset_base(&common, &dataset))?;
            let config = LearnerConfig {
                heads: heads.unwrap_or_else(|| scenario.default_head_count()),
                mode: mode.into(),
                epochs,
                batch_size,
                learning_rate,
                temperature,
                seed: common.seed,
                ..LearnerConfig::default()
            };
            let (state, curve) = learner::train(&scenario, &ds, &config)?;
            let (plain, _) = learner::train_plain_mlp(&scenario, &ds, &config)?;
            let ck = Checkpoint {
                version: CHECKPOINT_VERSION,
                config: config.clone(),
                state,
                plain: Some(plain),
            };
            ck.save(&dir.join("checkpoint.json"))?;
            learner::write_curve_csv(&dir.join("curve.csv"), &curve)?;
            write_manifest(
                &dir,
                &Manifest {
                    command: "train",
                    scenario: scenario.name(),
                    seed: common.seed,
                    params: serde_json::to_value(&config)?,
                },
            )?;
            let last = curve.last().context("empty learning curve")?;
            println!(
                "trained {} epochs: train_mse={:.6e} val_mse={:.6e} -> {}",
                last.epoch,
                last.train_mse,
                last.val_mse,
                dir.join("checkpoint.json").display()
            );
            Ok(0)
        }
        Command::Rollout { common, checkpoint, dataset, policy, rollouts, episodes, no_noise } => {
            let scenario = scenario_for(&common)?;
            let ck = match policy {
                PolicyArg::Expert => None,
                _ => Some(load_checkpoint(&checkpoint_path(&common, &checkpoint), &scenario)?),
            };
            let noise_scale = match dataset {
                Some(_) | None if matches!(policy, PolicyArg::Expert) => {
                    scenario.nominal_control_scale()
                }
                _ => match load_dataset(&dataset_base(&common, &dataset)) {
                    Ok(ds) => ds.control_scale(scenario.control_dim()),
                    Err(_) => scenario.nominal_control_scale(),
                },
            };
            let pol = build_policy(
                policy,
                ck.as_ref().map(|c| &c.state),
                ck.as_ref().and_then(|c| c.plain.as_ref()),
            )?;
            let plan = BenchPlan {
                master_seed: common.seed,
                n_episodes: episodes,
                n_rollouts: rollouts,
                noise_on: !no_noise,
            };
            let eps = sim::plan_episodes(&scenario, &plan);
            let traces = sim::run_policy(&scenario, &pol, &eps, &plan, &noise_scale);
            let report = sim::evaluate(&traces, &scenario)?;
            print_report(&report);
            Ok(0)
        }
        Command::Bench { common, checkpoint, dataset, rollouts, episodes, no_noise, check } => {
            let scenario = scenario_for(&common)?;
            let dir = out_dir(&common).join("bench");
            let ck = load_checkpoint(&checkpoint_path(&common, &checkpoint), &scenario)?;
            let ds = load_dataset(&dataset_base(&common, &dataset))?;
            let noise_scale = ds.control_scale(scenario.control_dim());
            let plain = ck.plain.as_ref().context("checkpoint lacks baseline network")?;
            let policies = [
                Policy::PoSafeNet { state: &ck.state, mode: CombineMode::Hard },
                Policy::PoSafeNet { state: &ck.state, mode: CombineMode::Mixture },
                Policy::PoSafeNet { state: &ck.state, mode: CombineMode::Gumbel },
                Policy::Expert,
                Policy::SimQp { nominal: plain, slack: None },
                Policy::SimQp { nominal: plain, slack: Some(BASELINE_SLACK_WEIGHT) },
                Policy::Unprotected { nominal: plain },
            ];
            let plan = BenchPlan {
                master_seed: common.seed,
                n_episodes: episodes,
                n_rollouts: rollouts,
                noise_on: !no_noise,
            };
            let rows = sim::benchmark(&scenario, &policies, &plan, &noise_scale, &dir)?;
            write_manifest(
                &dir,
                &Manifest {
                    command: "bench",
                    scenario: scenario.name(),
                    seed: common.seed,
                    params: serde_json::to_value(&plan)?,
                },
            )?;
            for r in &rows {
                print_report(r);
            }
            println!("table: {}", dir.join("bench.csv").display());
            if check {
                let get = |name: &str| rows.iter().find(|r| r.policy == name);
                let hard = get("posafenet_hard").context("missing posafenet_hard row")?;
                let mut ok = hard.feasibility;
                if scenario.phi_limits().is_some() {
                    // Manipulation: the guaranteed (maximal) constraints are
                    // the joint limits.
                    let mix = get("posafenet_mixture").context("missing mixture row")?;
                    ok &= hard.phi_viol_max == 0.0 && mix.phi_viol_max == 0.0;
                } else {
                    ok &= hard.safety_min >= 0.0;
                    if let Some(simqp) = get("simqp_hard") {
                        ok &= simqp.qp_success_pct < 100.0;
                    }
                }
                if !ok {
                    eprintln!("check failed: see table above");
                    return Ok(2);
                }
                println!("check passed");
            }
            Ok(0)
        }
        Command::Ablate { common, dataset, rollouts, episodes, epochs, check } => {
            let mut common = common;
            if common.scenario == "navigation" {
                // the ablation is a driving experiment; the four-level poset
                // keeps the vehicle moving (vMin), so ordering truly matters
                common.scenario = "driving4".into();
            }
            let scenario = scenario_for(&common)?;
            if scenario.lane_indices().is_none() {
                bail!("ablate requires a driving scenario");
            }
            let dir = out_dir(&common).join("ablation");
            std::fs::create_dir_all(&dir)?;
            let ds = load_dataset(&dataset_base(&common, &dataset))?;
            let noise_scale = ds.control_scale(scenario.control_dim());
            let config = LearnerConfig {
                heads: scenario.default_head_count(),
                epochs,
                seed: common.seed,
                ..LearnerConfig::default()
            };
            let plan = BenchPlan {
                master_seed: common.seed,
                n_episodes: episodes,
                n_rollouts: rollouts,
                noise_on: true,
            };
            let mut rows = Vec::new();
            let mut csv = String::from(sim::BENCH_CSV_HEADER);
            csv.push('\n');
            for variant in AblationVariant::all() {
                let report = sim::run_ablation_variant(
                    &scenario,
                    &ds,
                    &config,
                    variant,
                    &plan,
                    &noise_scale,
                )?;
                csv.push_str(&sim::metrics_csv_row(&report));
                csv.push('\n');
                print_report(&report);
                rows.push(report);
            }
            std::fs::write(dir.join("ablation.csv"), csv)?;
            write_manifest(
                &dir,
                &Manifest {
                    command: "ablate",
                    scenario: scenario.name(),
                    seed: common.seed,
                    params: serde_json::to_value(&plan)?,
                },
            )?;
            if check {
                let get = |name: &str| rows.iter().find(|r| r.policy == name).unwrap();
                let wrong = get("wrong_order");
                let fix = get("fix_order");
                let hard = get("hard");
                let mixture = get("mixture");
                let ok = wrong.crash_pct > 0.0
                    && fix.crash_pct == 0.0
                    && hard.crash_pct == 0.0
                    && mixture.crash_pct == 0.0
                    && fix.lane_viol_mean < mixture.lane_viol_mean;
                if !ok {
                    eprintln!("check failed: see table above");
                    return Ok(2);
                }
                println!("check passed");
            }
            Ok(0)
        }
        Command::Timing { common, check } => {
            let dir = out_dir(&common).join("timing");
            std::fs::create_dir_all(&dir)?;
            let batches = [1usize, 8, 32, 128, 512, 1024];
            let heads: Vec<usize> = (1..=10).collect();
            let report = sim::timing_bench(&batches, &heads, common.seed);
            sim::write_timing_csv(&dir.join("timing.csv"), &report)?;
            write_manifest(
                &dir,
                &Manifest {
                    command: "timing",
                    scenario: &common.scenario,
                    seed: common.seed,
                    params: serde_json::json!({ "batches": batches, "heads": heads }),
                },
            )?;
            let row128 = report
                .rows
                .iter()
                .find(|r| r.batch == 128 && r.heads == 1)
                .context("missing batch-128 row")?;
            let ratio = row128.oracle_ns_per_item / row128.projection_ns_per_item;
            let (slope, _, r2) = report.heads_fit;
            println!(
                "batch 128: projection {:.0} ns vs oracle {:.0} ns ({:.1}x); head fit slope {:.1} ns/head, R2={:.4}",
                row128.projection_ns_per_item, row128.oracle_ns_per_item, ratio, slope, r2
            );
            println!("table: {}", dir.join("timing.csv").display());
            if check && !(ratio >= 2.0 && r2 >= 0.95) {
                eprintln!("check failed: ratio {:.2}, R2 {:.4}", ratio, r2);
                return Ok(2);
            }
            Ok(0)
        }
        Command::Poset { common, limit, dot } => {
            let scenario = scenario_for(&common)?;
            if dot {
                let labels = scenario.constraint_labels();
                println!("{}", scenario.poset.to_dot(Some(&labels)));
                return Ok(0);
            }
            println!("scenario {}: {} constraints", scenario.name(), scenario.n_constraints());
            for (i, label) in scenario.constraint_labels().iter().enumerate() {
                println!("  [{}] {}", i, label);
            }
            println!("relations (cover):");
            for (a, b) in scenario.poset.cover_relations() {
                println!("  {} < {}", a, b);
            }
            let total = scenario.poset.count_linear_extensions();
            let exts = scenario.poset.enumerate_linear_extensions(limit);
            println!("{} linear extensions{}:", total, if total > limit { " (truncated)" } else { "" });
            for e in exts {
                println!("  {:?}", e.order());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(3)
        }
    }
}
