//! Closed-loop rollouts with execution noise, benchmark metrics, the
//! order-sensitivity ablation, and projection-vs-QP timing.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{audit_poset_respecting, sequential_project, CombineMode, OverrideEvent};
use crate::dynamics::{Episode, Scenario, ScenarioConfig};
use crate::geometry::Gains;
use crate::learner::{train_with_extensions, Dataset, LearnerConfig, Mlp, TrainState};
use crate::linalg;
use crate::poset::LinearExtension;
use crate::qp::{self, QpError, QpProblem};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no traces to evaluate")]
    EmptyTraces,
    #[error(transparent)]
    Learner(#[from] crate::learner::LearnerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// Slack weight used by the soft simultaneous-QP baseline.
pub const BASELINE_SLACK_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// Trained poset-projection policy evaluated in the given combine mode.
    PoSafeNet { state: &'a TrainState, mode: CombineMode },
    /// Reference controller filtered through the hard QP (data-generating
    /// expert).
    Expert,
    /// Learned nominal network with all constraints enforced simultaneously
    /// by one QP; `slack` = None is the hard variant.
    SimQp { nominal: &'a Mlp, slack: Option<f64> },
    /// Learned nominal network applied raw (end-to-end analog).
    Unprotected { nominal: &'a Mlp },
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::PoSafeNet { mode: CombineMode::Hard, .. } => "posafenet_hard",
            Policy::PoSafeNet { mode: CombineMode::Mixture, .. } => "posafenet_mixture",
            Policy::PoSafeNet { mode: CombineMode::Gumbel, .. } => "posafenet_gumbel",
            Policy::Expert => "expert",
            Policy::SimQp { slack: None, .. } => "simqp_hard",
            Policy::SimQp { slack: Some(_), .. } => "simqp_slack",
            Policy::Unprotected { .. } => "unprotected",
        }
    }
}

/// Everything recorded along one closed-loop rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub policy: String,
    pub seed: u64,
    pub episode_index: usize,
    pub episode: Episode,
    pub states: Vec<Vec<f64>>,
    /// Applied control (post safety layer, post noise) per step.
    pub controls: Vec<Vec<f64>>,
    /// Per-constraint barrier values at each visited state.
    pub barriers: Vec<Vec<f64>>,
    pub overrides: Vec<OverrideEvent>,
    /// Per-step success of producing a safety-filtered control (false on QP
    /// infeasibility; the nominal control is applied instead).
    pub layer_ok: Vec<bool>,
    /// Safety-layer wall-clock per step, nanoseconds.
    pub layer_time_ns: Vec<u64>,
    pub termination: Option<String>,
}

impl RolloutTrace {
    pub fn feasible(&self) -> bool {
        self.termination.is_none() && self.layer_ok.iter().all(|&ok| ok)
    }
}

/// Runs one rollout. Noise is zero-mean uniform with half-range 10% of the
/// per-channel control scale, added after the safety layer. Deterministic
/// given (`seed`, policy, episode).
pub fn rollout(
    scenario: &Scenario,
    policy: &Policy,
    episode: &Episode,
    episode_index: usize,
    seed: u64,
    noise_on: bool,
    noise_scale: &[f64],
) -> RolloutTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = scenario.horizon();
    let m = scenario.control_dim();
    let mut trace = RolloutTrace {
        policy: policy.name().into(),
        seed,
        episode_index,
        episode: episode.clone(),
        states: Vec::with_capacity(horizon),
        controls: Vec::with_capacity(horizon),
        barriers: Vec::with_capacity(horizon),
        overrides: Vec::new(),
        layer_ok: Vec::with_capacity(horizon),
        layer_time_ns: Vec::with_capacity(horizon),
        termination: None,
    };
    let expert_gains = scenario.expert_gains();
    let mut x = episode.x0.clone();
    for step in 0..horizon {
        trace.states.push(x.clone());
        trace.barriers.push(scenario.barrier_values(&x, episode));
        let started = Instant::now();
        let (mut u, ok) = match policy_step(scenario, policy, episode, &x, &expert_gains, &mut trace)
        {
            Ok(pair) => pair,
            Err(reason) => {
                trace.termination = Some(reason);
                break;
            }
        };
        trace.layer_time_ns.push(started.elapsed().as_nanos() as u64);
        trace.layer_ok.push(ok);
        if noise_on {
            for (ui, &sc) in u.iter_mut().zip(noise_scale.iter().chain(std::iter::repeat(&1.0))) {
                let half = 0.1 * sc;
                *ui += rng.gen_range(-half..=half);
            }
        }
        // Plant-level actuator saturation, applied uniformly to every policy.
        for (ui, lim) in u.iter_mut().zip(scenario.control_limits()) {
            *ui = ui.clamp(-lim, lim);
        }
        trace.controls.push(u.clone());
        match scenario.step(&x, &u) {
            Ok(next) => x = next,
            Err(e) => {
                trace.termination = Some(e.to_string());
                break;
            }
        }
        let _ = (step, m);
    }
    trace
}

fn policy_step(
    scenario: &Scenario,
    policy: &Policy,
    episode: &Episode,
    x: &[f64],
    expert_gains: &[Gains],
    trace: &mut RolloutTrace,
) -> Result<(Vec<f64>, bool), String> {
    match policy {
        Policy::PoSafeNet { state, mode } => {
            let features = scenario.features(x, episode);
            let halfspaces = scenario
                .compile_halfspaces(x, &state.gains, episode)
                .map_err(|e| e.to_string())?;
            let mut head_controls = Vec::with_capacity(state.heads.len());
            for (h, mlp) in state.heads.iter().enumerate() {
                let u_nom = mlp.forward(&features);
                let (u, events) = sequential_project(&halfspaces, &state.extensions[h], &u_nom)
                    .map_err(|e| e.to_string())?;
                let step_1based = trace.states.len();
                trace.overrides.extend(events.into_iter().map(|mut e| {
                    e.step = step_1based;
                    e
                }));
                head_controls.push(u);
            }
            let mut combiner = state.combiner.clone();
            combiner.mode = *mode;
            let (u, _) = combiner
                .combine::<ChaCha8Rng>(&head_controls, None)
                .map_err(|e| e.to_string())?;
            Ok((u, true))
        }
        Policy::Expert => match qp::expert_control(scenario, x, episode) {
            Ok(u) => Ok((u, true)),
            Err(qp::ExpertError::Qp(QpError::Infeasible)) => {
                Ok((scenario.reference_control(x, episode), false))
            }
            Err(e) => Err(e.to_string()),
        },
        Policy::SimQp { nominal, slack } => {
            let features = scenario.features(x, episode);
            let u_nom = nominal.forward(&features);
            let mut constraints = scenario
                .compile_halfspaces(x, expert_gains, episode)
                .map_err(|e| e.to_string())?;
            let bounds = scenario.bound_halfspaces(constraints.len());
            if constraints.len() + bounds.len() <= qp::MAX_CONSTRAINTS {
                constraints.extend(bounds);
            }
            let problem = match slack {
                None => QpProblem::hard(u_nom.clone(), constraints),
                Some(w) => QpProblem::with_slack(u_nom.clone(), constraints, *w),
            };
            match qp::solve(&problem) {
                Ok(sol) => Ok((sol.u, true)),
                Err(QpError::Infeasible) => Ok((u_nom, false)),
                Err(e) => Err(e.to_string()),
            }
        }
        Policy::Unprotected { nominal } => {
            let features = scenario.features(x, episode);
            Ok((nominal.forward(&features), true))
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenReport {
    pub episodes: usize,
    pub samples: usize,
    /// Steps where the expert QP was infeasible; dropped from the dataset.
    pub infeasible_dropped: usize,
}

/// Rolls out the expert over freshly sampled episodes and records
/// (state, expert control, barrier values) at every step. Infeasible expert
/// steps are dropped and counted; the rollout continues on the raw
/// reference control.
pub fn generate_dataset(scenario: &Scenario, n_episodes: usize, seed: u64) -> (Dataset, GenReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for e in 0..n_episodes {
        let ep = scenario.sample_episode(&mut rng);
        let mut x = ep.x0.clone();
        for t in 0..scenario.horizon() {
            let b = scenario.barrier_values(&x, &ep);
            let u = match qp::expert_control(scenario, &x, &ep) {
                Ok(u) => {
                    samples.push(crate::learner::DataSample {
                        episode: e,
                        t,
                        x: x.clone(),
                        u: u.clone(),
                        b,
                    });
                    u
                }
                Err(qp::ExpertError::Qp(QpError::Infeasible)) => {
                    dropped += 1;
                    scenario.reference_control(&x, &ep)
                }
                Err(_) => break,
            };
            match scenario.step(&x, &u) {
                Ok(next) => x = next,
                Err(_) => break,
            }
        }
        episodes.push(ep);
    }
    let report =
        GenReport { episodes: n_episodes, samples: samples.len(), infeasible_dropped: dropped };
    (Dataset { scenario: scenario.name().into(), episodes, samples }, report)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub n_rollouts: usize,
    /// min over rollouts of min over time of the obstacle safety margin.
    pub safety_min: f64,
    /// mean over rollouts and time of the obstacle safety margin.
    pub safety_mean: f64,
    /// Control MSE against the noise-free expert rollout from the same
    /// initial condition.
    pub mse_mean: f64,
    pub mse_var: f64,
    pub final_distance_mean: f64,
    /// A control was produced by the safety layer at every step of every
    /// rollout.
    pub feasibility: bool,
    /// Percentage of rollouts whose safety layer never failed.
    pub qp_success_pct: f64,
    pub top_safety_guarantee: bool,
    /// Time-averaged across-rollout std of each control channel.
    pub uncertainty: Vec<f64>,
    pub rollout_time_avg_ms: f64,
    /// Override-audit violations against the scenario poset.
    pub audit_violations: usize,
    // manipulation extras
    pub phi_viol_mean: f64,
    pub phi_viol_max: f64,
    // driving extras
    pub pass_pct: f64,
    pub crash_pct: f64,
    pub lane_viol_min: f64,
    pub lane_viol_mean: f64,
    pub ey_abs_mean: f64,
    pub ey_abs_var: f64,
    pub time_out_of_lane: f64,
    /// Mean |u1| per step (our rotation-violation definition).
    pub rot_viol: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    v.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
}

fn trace_safety_margin(trace: &RolloutTrace, safety_idx: &[usize]) -> Vec<f64> {
    trace
        .barriers
        .iter()
        .map(|b| safety_idx.iter().map(|&i| b[i]).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Appendix-style metric aggregation over a set of rollouts of one policy.
pub fn evaluate(traces: &[RolloutTrace], scenario: &Scenario) -> Result<MetricsReport, SimError> {
    if traces.is_empty() || traces.iter().all(|t| t.states.is_empty()) {
        return Err(SimError::EmptyTraces);
    }
    let safety_idx = scenario.safety_indices();
    let m = scenario.control_dim();

    let mut safety_min = f64::INFINITY;
    let mut safety_sum = 0.0;
    let mut safety_count = 0usize;
    let mut per_rollout_mse = Vec::new();
    let mut finals = Vec::new();
    let mut layer_all_ok = 0usize;
    let mut audit_violations = 0usize;
    let mut total_time_ms = Vec::new();

    // Reference (noise-free expert) controls per episode for the MSE column.
    let mut ref_cache: std::collections::BTreeMap<usize, RolloutTrace> = Default::default();

    for t in traces {
        let margins = trace_safety_margin(t, &safety_idx);
        for &v in &margins {
            safety_min = safety_min.min(v);
            safety_sum += v;
            safety_count += 1;
        }
        if t.feasible() {
            layer_all_ok += 1;
        }
        audit_violations += audit_poset_respecting(&t.overrides, &scenario.poset).len();
        total_time_ms
            .push(t.layer_time_ns.iter().map(|&n| n as f64).sum::<f64>() / 1e6);

        let reference = ref_cache.entry(t.episode_index).or_insert_with(|| {
            rollout(scenario, &Policy::Expert, &t.episode, t.episode_index, 0, false, &[])
        });
        let n = t.controls.len().min(reference.controls.len());
        if n > 0 {
            let mse = (0..n)
                .map(|k| linalg::dist_sq(&t.controls[k], &reference.controls[k]))
                .sum::<f64>()
                / n as f64;
            per_rollout_mse.push(mse);
        }
        if let Some(last) = t.states.last() {
            finals.push(final_distance(scenario, last, &t.episode));
        }
    }

    // Uncertainty: std of controls across rollouts of the same episode at
    // each time step, averaged over time and episodes.
    let mut uncertainty = vec![0.0; m];
    {
        let mut groups: std::collections::BTreeMap<usize, Vec<&RolloutTrace>> = Default::default();
        for t in traces {
            groups.entry(t.episode_index).or_default().push(t);
        }
        let mut acc = vec![Vec::new(); m];
        for group in groups.values() {
            let min_len = group.iter().map(|t| t.controls.len()).min().unwrap_or(0);
            if group.len() < 2 {
                for ch in acc.iter_mut() {
                    if min_len > 0 {
                        ch.push(0.0);
                    }
                }
                continue;
            }
            for k in 0..min_len {
                for ch in 0..m {
                    let vals: Vec<f64> = group.iter().map(|t| t.controls[k][ch]).collect();
                    acc[ch].push(variance(&vals).sqrt());
                }
            }
        }
        for ch in 0..m {
            uncertainty[ch] = mean(&acc[ch]);
        }
    }

    // scenario extras
    let mut phi_viols = Vec::new();
    let mut lane_mins = Vec::new();
    let mut lane_viol_min = f64::INFINITY;
    let mut ey_abs = Vec::new();
    let mut rot = Vec::new();
    let mut out_of_lane_steps = 0usize;
    let mut lane_steps = 0usize;
    let mut crashes = 0usize;
    if let Some((phi_min, phi_max)) = scenario.phi_limits() {
        for t in traces {
            for x in &t.states {
                let phi = crate::dynamics::relative_joint_angle(x);
                let viol = (phi - phi_max).max(0.0) + (phi_min - phi).max(0.0);
                phi_viols.push(viol);
            }
        }
    }
    if let Some((li, ri)) = scenario.lane_indices() {
        for t in traces {
            let margins = trace_safety_margin(t, &safety_idx);
            let crashed = margins.iter().any(|&v| v < 0.0) || t.termination.is_some();
            if crashed {
                crashes += 1;
            }
            for (b, x) in t.barriers.iter().zip(&t.states) {
                let lane = b[li].min(b[ri]);
                lane_viol_min = lane_viol_min.min(lane);
                lane_mins.push(lane.min(0.0));
                if lane < 0.0 {
                    out_of_lane_steps += 1;
                }
                lane_steps += 1;
                ey_abs.push(x[1].abs());
            }
            for u in &t.controls {
                rot.push(u[0].abs());
            }
        }
    }

    let n_rollouts = traces.len();
    let safety_mean = safety_sum / safety_count.max(1) as f64;
    let feasibility = layer_all_ok == n_rollouts;
    let is_driving = scenario.lane_indices().is_some();
    let is_manip = scenario.phi_limits().is_some();
    let phi_viol_max = phi_viols.iter().cloned().fold(0.0f64, f64::max);
    // The guarantee covers the maximal constraints of the poset: for
    // manipulation those are the joint limits (the obstacle sits below
    // them), everywhere else the obstacle barriers.
    let top_safety = if is_manip { phi_viol_max == 0.0 } else { safety_min >= 0.0 };
    Ok(MetricsReport {
        policy: traces[0].policy.clone(),
        n_rollouts,
        safety_min,
        safety_mean,
        mse_mean: mean(&per_rollout_mse),
        mse_var: variance(&per_rollout_mse),
        final_distance_mean: mean(&finals),
        feasibility,
        qp_success_pct: 100.0 * layer_all_ok as f64 / n_rollouts as f64,
        top_safety_guarantee: top_safety,
        uncertainty,
        rollout_time_avg_ms: mean(&total_time_ms),
        audit_violations,
        phi_viol_mean: if is_manip { mean(&phi_viols) } else { f64::NAN },
        phi_viol_max: if is_manip { phi_viol_max } else { f64::NAN },
        pass_pct: if is_driving {
            100.0 * (n_rollouts - crashes) as f64 / n_rollouts as f64
        } else {
            f64::NAN
        },
        crash_pct: if is_driving { 100.0 * crashes as f64 / n_rollouts as f64 } else { f64::NAN },
        lane_viol_min: if is_driving { lane_viol_min } else { f64::NAN },
        lane_viol_mean: if is_driving { mean(&lane_mins) } else { f64::NAN },
        ey_abs_mean: if is_driving { mean(&ey_abs) } else { f64::NAN },
        ey_abs_var: if is_driving { variance(&ey_abs) } else { f64::NAN },
        time_out_of_lane: if is_driving {
            out_of_lane_steps as f64 / lane_steps.max(1) as f64
        } else {
            f64::NAN
        },
        rot_viol: if is_driving { mean(&rot) } else { f64::NAN },
    })
}

fn final_distance(scenario: &Scenario, x: &[f64], episode: &Episode) -> f64 {
    match &scenario.config {
        ScenarioConfig::Navigation(_) => {
            let (dx, dy) = (episode.goal[0] - x[0], episode.goal[1] - x[1]);
            (dx * dx + dy * dy).sqrt()
        }
        ScenarioConfig::Manipulation(_) => {
            let d1 = crate::linalg::wrap_angle(episode.goal[0] - x[0]);
            let d2 = crate::linalg::wrap_angle(episode.goal[1] - x[2]);
            (d1 * d1 + d2 * d2).sqrt()
        }
        ScenarioConfig::Driving(_) => x[1].abs(),
    }
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// Seeds and rollout plan for one benchmark run. Every random draw in the
/// benchmark is derived from `master_seed` by a fixed counter scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchPlan {
    pub master_seed: u64,
    pub n_episodes: usize,
    pub n_rollouts: usize,
    pub noise_on: bool,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self { master_seed: 0, n_episodes: 24, n_rollouts: 100, noise_on: true }
    }
}

/// Samples the shared evaluation episodes for a plan.
pub fn plan_episodes(scenario: &Scenario, plan: &BenchPlan) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.master_seed.wrapping_add(0xE9));
    (0..plan.n_episodes).map(|_| scenario.sample_episode(&mut rng)).collect()
}

/// Runs `plan.n_rollouts` noisy rollouts of one policy, cycling through the
/// shared episode list.
pub fn run_policy(
    scenario: &Scenario,
    policy: &Policy,
    episodes: &[Episode],
    plan: &BenchPlan,
    noise_scale: &[f64],
) -> Vec<RolloutTrace> {
    (0..plan.n_rollouts)
        .map(|k| {
            let ep_idx = k % episodes.len();
            let seed = plan
                .master_seed
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add(k as u64 + 1);
            rollout(scenario, policy, &episodes[ep_idx], ep_idx, seed, plan.noise_on, noise_scale)
        })
        .collect()
}

pub const BENCH_CSV_HEADER: &str = "policy,n_rollouts,safety_min,safety_mean,mse_mean,mse_var,final_distance_mean,feasibility,qp_success_pct,top_safety_guarantee,uncertainty_u1,uncertainty_u2,rollout_time_avg_ms,audit_violations,phi_viol_mean,phi_viol_max,pass_pct,crash_pct,lane_viol_min,lane_viol_mean,ey_abs_mean,ey_abs_var,time_out_of_lane,rot_viol";

pub fn metrics_csv_row(r: &MetricsReport) -> String {
    let u1 = r.uncertainty.first().copied().unwrap_or(f64::NAN);
    let u2 = r.uncertainty.get(1).copied().unwrap_or(f64::NAN);
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.2},{},{:.6},{:.6},{:.4},{},{:.6},{:.6},{:.2},{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.policy,
        r.n_rollouts,
        r.safety_min,
        r.safety_mean,
        r.mse_mean,
        r.mse_var,
        r.final_distance_mean,
        r.feasibility,
        r.qp_success_pct,
        r.top_safety_guarantee,
        u1,
        u2,
        r.rollout_time_avg_ms,
        r.audit_violations,
        r.phi_viol_mean,
        r.phi_viol_max,
        r.pass_pct,
        r.crash_pct,
        r.lane_viol_min,
        r.lane_viol_mean,
        r.ey_abs_mean,
        r.ey_abs_var,
        r.time_out_of_lane,
        r.rot_viol
    )
}

/// Full benchmark: every policy over the shared plan. Emits `bench.csv`,
/// `traces/<policy>/<seed>.jsonl`, and `trajectories/<policy>.csv`.
pub fn benchmark(
    scenario: &Scenario,
    policies: &[Policy],
    plan: &BenchPlan,
    noise_scale: &[f64],
    out_dir: &Path,
) -> Result<Vec<MetricsReport>, SimError> {
    std::fs::create_dir_all(out_dir)?;
    let episodes = plan_episodes(scenario, plan);
    let mut rows = Vec::new();
    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for policy in policies {
        let traces = run_policy(scenario, policy, &episodes, plan, noise_scale);
        let report = evaluate(&traces, scenario)?;
        csv.push_str(&metrics_csv_row(&report));
        csv.push('\n');
        write_traces(out_dir, policy.name(), &traces)?;
        write_trajectories(out_dir, scenario, policy.name(), &traces)?;
        rows.push(report);
    }
    std::fs::write(out_dir.join("bench.csv"), csv)?;
    Ok(rows)
}

fn write_traces(out_dir: &Path, policy: &str, traces: &[RolloutTrace]) -> Result<(), SimError> {
    let dir = out_dir.join("traces").join(policy);
    std::fs::create_dir_all(&dir)?;
    for t in traces {
        let mut line = serde_json::to_string(t)?;
        line.push('\n');
        std::fs::write(dir.join(format!("{}.jsonl", t.seed)), line)?;
    }
    Ok(())
}

fn write_trajectories(
    out_dir: &Path,
    scenario: &Scenario,
    policy: &str,
    traces: &[RolloutTrace],
) -> Result<(), SimError> {
    let dir = out_dir.join("trajectories");
    std::fs::create_dir_all(&dir)?;
    let planar = !matches!(scenario.config, ScenarioConfig::Manipulation(_));
    let header = if planar { "rollout,t,p1,p2\n" } else { "rollout,t,theta1,theta2\n" };
    let mut csv = String::from(header);
    for (k, t) in traces.iter().enumerate() {
        for (step, x) in t.states.iter().enumerate() {
            let (p1, p2) = match scenario.config {
                ScenarioConfig::Manipulation(_) => (x[0], x[2]),
                _ => (x[0], x[1]),
            };
            csv.push_str(&format!("{},{},{:.9},{:.9}\n", k, step, p1, p2));
        }
    }
    std::fs::write(dir.join(format!("{}.csv", policy)), csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Order-sensitivity ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Single head, canonical order (lanes first, obstacle last).
    FixOrder,
    /// Single head with the priorities swapped: obstacle first, lanes last.
    WrongOrder,
    /// Multi-head argmax selection.
    Hard,
    /// Multi-head softmax mixing.
    Mixture,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 4] {
        [Self::FixOrder, Self::WrongOrder, Self::Hard, Self::Mixture]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FixOrder => "fix_order",
            Self::WrongOrder => "wrong_order",
            Self::Hard => "hard",
            Self::Mixture => "mixture",
        }
    }
}

fn wrong_order_extension(scenario: &Scenario) -> LinearExtension {
    // move every maximal (obstacle) constraint to the front so lane
    // constraints are enforced after it and can push back into collision
    let maximal = scenario.poset.maximal_elements();
    let mut order = maximal.clone();
    for i in 0..scenario.n_constraints() {
        if !maximal.contains(&i) {
            order.push(i);
        }
    }
    LinearExtension::new_unchecked(order)
}

/// Trains one driving variant and returns its evaluated metrics.
pub fn run_ablation_variant(
    scenario: &Scenario,
    dataset: &Dataset,
    base_config: &LearnerConfig,
    variant: AblationVariant,
    plan: &BenchPlan,
    noise_scale: &[f64],
) -> Result<MetricsReport, SimError> {
    let mut config = base_config.clone();
    let (extensions, mode) = match variant {
        AblationVariant::FixOrder => {
            config.heads = 1;
            (Some(scenario.head_extensions(1)), CombineMode::Hard)
        }
        AblationVariant::WrongOrder => {
            config.heads = 1;
            (Some(vec![wrong_order_extension(scenario)]), CombineMode::Hard)
        }
        AblationVariant::Hard => (None, CombineMode::Hard),
        AblationVariant::Mixture => (None, CombineMode::Mixture),
    };
    config.mode = mode;
    let (state, _) = train_with_extensions(scenario, dataset, &config, extensions)?;
    let policy = Policy::PoSafeNet { state: &state, mode };
    let episodes = plan_episodes(scenario, plan);
    let traces = run_policy(scenario, &policy, &episodes, plan, noise_scale);
    let mut report = evaluate(&traces, scenario)?;
    report.policy = variant.name().into();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub batch: usize,
    pub heads: usize,
    pub constraints: usize,
    pub projection_ns_per_item: f64,
    pub oracle_ns_per_item: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Linear fit of per-item projection time vs head count at the largest
    /// batch: (slope, intercept, r2).
    pub heads_fit: (f64, f64, f64),
}

fn random_projection_instances(
    n: usize,
    constraints: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<crate::geometry::Halfspace>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let hs: Vec<_> = (0..constraints)
                .map(|id| {
                    let a = vec![rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0)];
                    let a = if linalg::norm(&a) < 1e-3 { vec![1.0, 0.0] } else { a };
                    crate::geometry::Halfspace::new(a, rng.gen_range(-0.5..0.5), id)
                })
                .collect();
            let u = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            (hs, u)
        })
        .collect()
}

/// Wall-clock comparison of the closed-form sequential projection against
/// the active-set oracle, plus head-count scaling.
pub fn timing_bench(batch_sizes: &[usize], head_counts: &[usize], seed: u64) -> TimingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let constraints = 3;
    let ext = LinearExtension::new_unchecked(vec![0, 1, 2]);
    let mut rows = Vec::new();
    let mut sink = 0.0f64;
    for &batch in batch_sizes {
        let instances = random_projection_instances(batch, constraints, &mut rng);
        // one-head sequential projection
        let reps = (2048 / batch.max(1)).max(1);
        let started = Instant::now();
        for _ in 0..reps {
            for (hs, u) in &instances {
                let (out, _) = sequential_project(hs, &ext, u).unwrap();
                sink += out[0];
            }
        }
        let proj_ns = started.elapsed().as_nanos() as f64 / (reps * batch) as f64;
        let started = Instant::now();
        for _ in 0..reps {
            for (hs, u) in &instances {
                if let Ok(sol) = qp::solve(&QpProblem::hard(u.clone(), hs.clone())) {
                    sink += sol.u[0];
                }
            }
        }
        let qp_ns = started.elapsed().as_nanos() as f64 / (reps * batch) as f64;
        rows.push(TimingRow {
            batch,
            heads: 1,
            constraints,
            projection_ns_per_item: proj_ns,
            oracle_ns_per_item: qp_ns,
        });
    }
    // head scaling at a fixed batch
    let batch = 256;
    let instances = random_projection_instances(batch, constraints, &mut rng);
    // warmup so cache effects do not bias the first (smallest) head count
    for (hs, u) in &instances {
        let (out, _) = sequential_project(hs, &ext, u).unwrap();
        sink += out[0];
    }
    let mut head_times = Vec::new();
    for &h in head_counts {
        let reps = 32;
        let started = Instant::now();
        for _ in 0..reps {
            for (hs, u) in &instances {
                for _ in 0..h {
                    let (out, _) = sequential_project(hs, &ext, u).unwrap();
                    sink += out[0];
                }
            }
        }
        let ns = started.elapsed().as_nanos() as f64 / (reps * batch) as f64;
        head_times.push(ns);
        rows.push(TimingRow {
            batch,
            heads: h,
            constraints,
            projection_ns_per_item: ns,
            oracle_ns_per_item: f64::NAN,
        });
    }
    let xs: Vec<f64> = head_counts.iter().map(|&h| h as f64).collect();
    let heads_fit = linalg::linear_fit(&xs, &head_times);
    // keep the optimizer from eliding the timed loops
    assert!(sink.is_finite() || sink.is_nan());
    TimingReport { rows, heads_fit }
}

pub fn write_timing_csv(path: &Path, report: &TimingReport) -> std::io::Result<()> {
    let mut out =
        String::from("batch,heads,constraints,projection_ns_per_item,oracle_ns_per_item\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.1},{:.1}\n",
            r.batch, r.heads, r.constraints, r.projection_ns_per_item, r.oracle_ns_per_item
        ));
    }
    std::fs::write(path, out)
}
