//! Experiment orchestration: seeded training rounds, the disturbance
//! benchmark, value-matching diagnostics, and the gradient health gate.
//!
//! Persistence layout under `<output_dir>/<run_id>/`:
//!
//! ```text
//! config.toml, config.hash
//! theta_init.json
//! rounds/<j>/theta.json          parameters after round j
//! rounds/<j>/diagnostics.json    losses, gradient norms, val MSE
//! rounds/<j>/trajectories/ep_<i>.jsonl
//! rounds/<j>/done                completion marker (enables resume)
//! bench/report.{json,txt}, bench/trial_<k>_{baseline,learned}.csv
//! diagnose/{match_pairs.csv, summary.json, gradient_audit.json}
//! ```
//!
//! Every stream of randomness derives from the master seed and a stream
//! label, so an interrupted run resumes bitwise.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchScenario, MatchDiagnostics};
use crate::config::{Resolved, RunConfig};
use crate::error::Error;
use crate::io;
use crate::learner::{self, Anchor, RoundDiagnostics};
use crate::mpc::RecedingHorizonController;
use crate::plant::{self, schedule_benchmark_disturbances, DisturbanceProfile, Plant};
use crate::seeds;
use crate::valuation::{self, ParamVector, Trajectory, PARAM_DIM};
use crate::Result;

/// Seed stream labels.
const STREAM_COLLECT: u64 = 1;
const STREAM_LEARN: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.output_dir.join(&cfg.run_id) }
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn hash_file(&self) -> PathBuf {
        self.root.join("config.hash")
    }

    pub fn theta_init(&self) -> PathBuf {
        self.root.join("theta_init.json")
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join("rounds").join(format!("{round:04}"))
    }

    pub fn round_theta(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("theta.json")
    }

    pub fn round_diagnostics(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("diagnostics.json")
    }

    pub fn round_trajectory(&self, round: usize, episode: usize) -> PathBuf {
        self.round_dir(round).join("trajectories").join(format!("ep_{episode:03}.jsonl"))
    }

    pub fn round_done(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("done")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn diagnose_dir(&self) -> PathBuf {
        self.root.join("diagnose")
    }
}

fn episode_seed(master: u64, round: usize, episode: usize) -> u64 {
    seeds::derive(
        seeds::derive(master, STREAM_COLLECT),
        ((round as u64) << 32) | episode as u64,
    )
}

fn learn_seed(master: u64, round: usize) -> u64 {
    seeds::derive(seeds::derive(master, STREAM_LEARN), round as u64)
}

/// Collect one on-policy episode with a fresh plant and controller.
fn collect_episode(
    cfg: &RunConfig,
    resolved: &Resolved,
    theta: &ParamVector,
    seed: u64,
    steps: usize,
    disturbances: DisturbanceProfile,
) -> Result<Trajectory> {
    let mut plant = Plant::new(
        resolved.initial_state,
        cfg.dt,
        resolved.nominal_dynamics.clone(),
        resolved.schedule.clone(),
        resolved.command,
        resolved.nominal_pose.clone(),
        resolved.task_weights.clone(),
        cfg.plant.resolve(seed)?,
        disturbances,
    )?;
    let mut controller = RecedingHorizonController::new(
        theta.clone(),
        resolved.schedule.clone(),
        resolved.constraints.clone(),
        cfg.solver.clone(),
        resolved.command,
        resolved.nominal_pose.clone(),
    );
    plant::collect_rollout(&mut controller, &mut plant, steps)
}

/// Collect a round's worth of episodes in parallel with per-episode seeds.
pub fn collect_round_dataset(
    cfg: &RunConfig,
    resolved: &Resolved,
    theta: &ParamVector,
    round: usize,
) -> Result<Vec<Trajectory>> {
    (0..cfg.train.episodes_per_round)
        .into_par_iter()
        .map(|episode| {
            let seed = episode_seed(cfg.train.master_seed, round, episode);
            collect_episode(
                cfg,
                resolved,
                theta,
                seed,
                cfg.train.episode_steps,
                DisturbanceProfile::none(),
            )
        })
        .collect()
}

/// Per-round training summary persisted next to the artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rounds_completed: usize,
    pub resumed_rounds: usize,
    pub val_mse_pre: Vec<Option<f64>>,
    pub val_mse_post: Vec<Option<f64>>,
    pub final_theta_path: PathBuf,
}

/// Run (or resume) the on-policy training loop: collect closed-loop data
/// with the current parameters, then one round of cost-matching updates.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let paths = RunPaths::new(cfg);
    std::fs::create_dir_all(&paths.root)?;
    io::write_atomic(&paths.config_file(), cfg.to_toml()?.as_bytes())?;
    io::write_atomic(&paths.hash_file(), resolved.config_hash.as_bytes())?;
    io::save_theta(&paths.theta_init(), &resolved.theta0, 0, &resolved.config_hash)?;

    let mut theta = resolved.theta0.clone();
    let mut resumed = 0usize;
    let mut val_mse_pre = Vec::new();
    let mut val_mse_post = Vec::new();

    for round in 0..cfg.learner.rounds {
        if paths.round_done(round).exists() {
            let snap = io::load_theta(&paths.round_theta(round))?;
            if snap.config_hash != resolved.config_hash {
                return Err(Error::Config(format!(
                    "round {round} artifacts belong to a different config (hash mismatch)"
                )));
            }
            let diag: RoundDiagnostics = io::load_json(&paths.round_diagnostics(round))?;
            val_mse_pre.push(diag.val_mse_pre);
            val_mse_post.push(diag.val_mse_post);
            theta = snap.theta;
            resumed += 1;
            continue;
        }

        let dataset = collect_round_dataset(cfg, &resolved, &theta, round)?;
        for (episode, traj) in dataset.iter().enumerate() {
            io::save_trajectory(
                &paths.round_trajectory(round, episode),
                traj,
                &resolved.config_hash,
                episode_seed(cfg.train.master_seed, round, episode),
                episode,
            )?;
        }

        let mut learn_cfg = cfg.learner.clone();
        learn_cfg.rng_seed = learn_seed(cfg.train.master_seed, round);
        let (next_theta, diag) =
            learner::train_round(&theta, &dataset, &learn_cfg, &resolved.constraints)?;

        io::save_theta(&paths.round_theta(round), &next_theta, round + 1, &resolved.config_hash)?;
        io::save_json(&paths.round_diagnostics(round), &diag)?;
        io::write_atomic(&paths.round_done(round), b"ok\n")?;

        val_mse_pre.push(diag.val_mse_pre);
        val_mse_post.push(diag.val_mse_post);
        theta = next_theta;
    }

    let final_theta_path = if cfg.learner.rounds == 0 {
        paths.theta_init()
    } else {
        paths.round_theta(cfg.learner.rounds - 1)
    };
    Ok(TrainSummary {
        rounds_completed: cfg.learner.rounds,
        resumed_rounds: resumed,
        val_mse_pre,
        val_mse_post,
        final_theta_path,
    })
}

/// Build the disturbance benchmark scenario from the config.
pub fn bench_scenario(cfg: &RunConfig, resolved: &Resolved) -> Result<BenchScenario> {
    let profile = schedule_benchmark_disturbances().shifted(cfg.benchmark.pulse_offset);
    profile.validate()?;
    Ok(BenchScenario {
        dt: cfg.dt,
        initial_state: resolved.initial_state,
        nominal_dynamics: resolved.nominal_dynamics.clone(),
        schedule: resolved.schedule.clone(),
        command: resolved.command,
        nominal_pose: resolved.nominal_pose.clone(),
        task_weights: resolved.task_weights.clone(),
        constraints: resolved.constraints.clone(),
        solver: cfg.solver.clone(),
        plant: cfg.plant.resolve(0)?,
        profile,
        episode_steps: cfg.benchmark.episode_steps,
        recovery: resolved.recovery,
    })
}

/// Benchmark summary plus paths of the persisted artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSummary {
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
    pub improvement_settling_pct: f64,
    pub improvement_iae_pct: f64,
}

/// Compare two persisted parameter snapshots on the pulse benchmark.
pub fn cmd_bench(cfg: &RunConfig, baseline_path: &Path, learned_path: &Path) -> Result<BenchSummary> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let paths = RunPaths::new(cfg);
    let baseline = io::load_theta(baseline_path)?.theta;
    let learned = io::load_theta(learned_path)?.theta;
    let scenario = bench_scenario(cfg, &resolved)?;
    let report = bench::compare_controllers(&baseline, &learned, &cfg.benchmark.trial_seeds, &scenario)?;

    let dir = paths.bench_dir();
    std::fs::create_dir_all(&dir)?;
    let report_json = dir.join("report.json");
    let report_txt = dir.join("report.txt");
    io::save_json(&report_json, &report)?;
    io::write_atomic(&report_txt, report.render_table().as_bytes())?;
    write_bench_curves(&dir, cfg, &resolved, &baseline, &learned, &scenario)?;

    let settling = report.row("settling_time").map(|r| r.improvement_pct).unwrap_or(0.0);
    let iae = report.row("iae").map(|r| r.improvement_pct).unwrap_or(0.0);
    Ok(BenchSummary {
        report_json,
        report_txt,
        improvement_settling_pct: settling,
        improvement_iae_pct: iae,
    })
}

/// Per-step curve data of the first benchmark trial, for external plots.
fn write_bench_curves(
    dir: &Path,
    cfg: &RunConfig,
    _resolved: &Resolved,
    baseline: &ParamVector,
    learned: &ParamVector,
    scenario: &BenchScenario,
) -> Result<()> {
    let seed = *cfg.benchmark.trial_seeds.first().unwrap_or(&0);
    for (name, theta) in [("baseline", baseline), ("learned", learned)] {
        let mut plant_cfg = scenario.plant.clone();
        plant_cfg.rng_seed = seed;
        let mut plant = Plant::new(
            scenario.initial_state,
            scenario.dt,
            scenario.nominal_dynamics.clone(),
            scenario.schedule.clone(),
            scenario.command,
            scenario.nominal_pose.clone(),
            scenario.task_weights.clone(),
            plant_cfg,
            scenario.profile.clone(),
        )?;
        let mut controller = RecedingHorizonController::new(
            theta.clone(),
            scenario.schedule.clone(),
            scenario.constraints.clone(),
            scenario.solver.clone(),
            scenario.command,
            scenario.nominal_pose.clone(),
        );
        let traj = plant::collect_rollout(&mut controller, &mut plant, scenario.episode_steps)?;
        let rows: Vec<Vec<f64>> = traj
            .records
            .iter()
            .map(|r| {
                vec![
                    r.time,
                    (r.state.to_vector() - r.reference.state.to_vector()).norm(),
                    r.action.to_vector().norm(),
                    (r.state.lin_momentum - r.reference.state.lin_momentum).norm(),
                    (r.state.ang_momentum - r.reference.state.ang_momentum).norm(),
                ]
            })
            .collect();
        io::write_csv(
            &dir.join(format!("trial_{seed}_{name}.csv")),
            &["t", "tracking_error", "effort", "lin_mom_err", "ang_mom_err"],
            &rows,
        )?;
    }
    Ok(())
}

/// Fixed evaluation set for diagnostics: fresh on-policy rollouts with
/// eval-stream seeds, subsampled anchors.
pub fn evaluation_anchors(
    cfg: &RunConfig,
    resolved: &Resolved,
    theta: &ParamVector,
    episodes: usize,
    max_anchors: usize,
) -> Result<(Vec<Trajectory>, Vec<Vec<f64>>, Vec<Anchor>)> {
    let dataset: Result<Vec<Trajectory>> = (0..episodes)
        .into_par_iter()
        .map(|episode| {
            let seed = seeds::derive(
                seeds::derive(cfg.train.master_seed, STREAM_EVAL),
                episode as u64,
            );
            collect_episode(
                cfg,
                resolved,
                theta,
                seed,
                cfg.train.episode_steps,
                DisturbanceProfile::none(),
            )
        })
        .collect();
    let dataset = dataset?;
    let targets = learner::measured_returns(&dataset, cfg.learner.discount);
    let all = learner::valid_anchors(&dataset, cfg.learner.horizon);
    if all.is_empty() {
        return Err(Error::InsufficientData { horizon: cfg.learner.horizon });
    }
    let stride = (all.len() / max_anchors).max(1);
    let anchors: Vec<Anchor> = all.into_iter().step_by(stride).take(max_anchors).collect();
    Ok((dataset, targets, anchors))
}

/// Finite-difference audit of the surrogate gradient at `theta` over a
/// few anchors; reports the worst relative mismatch.
pub fn gradient_audit(
    theta: &ParamVector,
    dataset: &[Trajectory],
    anchors: &[Anchor],
    horizon: usize,
    constraints: &crate::constraints::ConstraintConfig,
    max_instances: usize,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for anchor in anchors.iter().take(max_instances) {
        let traj = &dataset[anchor.traj];
        let segment = traj
            .segment(anchor.index, horizon)
            .ok_or(Error::InsufficientData { horizon })?;
        let s0 = traj.records[anchor.index].state;
        let (grad, _) = valuation::q_mpc_gradient(theta, &s0, &segment, constraints)?;
        let flat = theta.flatten();
        let gmax = grad.amax().max(1e-12);
        for j in 0..PARAM_DIM {
            let h = 1e-5 * flat[j].abs().max(1.0);
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            let mut vhi = flat.clone();
            let mut vlo = flat.clone();
            vhi[j] += h;
            vlo[j] -= h;
            hi.assign_flat(&vhi);
            lo.assign_flat(&vlo);
            let qhi = valuation::q_mpc(&hi, &s0, &traj.segment(anchor.index, horizon).unwrap(), constraints)?.value;
            let qlo = valuation::q_mpc(&lo, &s0, &traj.segment(anchor.index, horizon).unwrap(), constraints)?.value;
            let fd = (qhi - qlo) / (2.0 * h);
            let denom = fd.abs().max(grad[j].abs()).max(1e-3 * gmax);
            worst = worst.max((fd - grad[j]).abs() / denom);
        }
    }
    Ok(worst)
}

/// Threshold of the gradient health gate (process exit code 3 above it).
pub const GRADIENT_GATE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub mse: f64,
    pub rmse: f64,
    pub anchors: usize,
    pub gradient_audit_max_rel: f64,
    pub gradient_gate_passed: bool,
}

/// Value-matching diagnostics plus the gradient health gate.
pub fn cmd_diagnose(cfg: &RunConfig, theta_path: &Path) -> Result<DiagnoseSummary> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let paths = RunPaths::new(cfg);
    let theta = io::load_theta(theta_path)?.theta;

    let (dataset, targets, anchors) = evaluation_anchors(cfg, &resolved, &theta, 4, 256)?;
    let diagnostics: MatchDiagnostics = bench::value_matching_eval(
        &theta,
        &dataset,
        &targets,
        &anchors,
        cfg.learner.horizon,
        &resolved.constraints,
    )?;
    let audit = gradient_audit(
        &theta,
        &dataset,
        &anchors,
        cfg.learner.horizon,
        &resolved.constraints,
        3,
    )?;

    let dir = paths.diagnose_dir();
    std::fs::create_dir_all(&dir)?;
    let rows: Vec<Vec<f64>> = diagnostics.pairs.iter().map(|(q, t)| vec![*q, *t]).collect();
    io::write_csv(&dir.join("match_pairs.csv"), &["q_mpc", "q_meas"], &rows)?;
    let summary = DiagnoseSummary {
        mse: diagnostics.mse,
        rmse: diagnostics.rmse,
        anchors: anchors.len(),
        gradient_audit_max_rel: audit,
        gradient_gate_passed: audit <= GRADIENT_GATE,
    };
    io::save_json(&dir.join("summary.json"), &summary)?;
    io::save_json(
        &dir.join("gradient_audit.json"),
        &serde_json::json!({ "max_relative_error": audit, "gate": GRADIENT_GATE }),
    )?;
    Ok(summary)
}

/// Standalone gradient audit (the check-gradients subcommand). Uses the
/// initial parameters when no snapshot is given.
pub fn cmd_check_gradients(cfg: &RunConfig, theta_path: Option<&Path>) -> Result<DiagnoseSummary> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let paths = RunPaths::new(cfg);
    let theta = match theta_path {
        Some(p) => io::load_theta(p)?.theta,
        None => resolved.theta0.clone(),
    };
    let (dataset, targets, anchors) = evaluation_anchors(cfg, &resolved, &theta, 2, 64)?;
    let audit = gradient_audit(
        &theta,
        &dataset,
        &anchors,
        cfg.learner.horizon,
        &resolved.constraints,
        3,
    )?;
    let diagnostics = bench::value_matching_eval(
        &theta,
        &dataset,
        &targets,
        &anchors,
        cfg.learner.horizon,
        &resolved.constraints,
    )?;
    let dir = paths.diagnose_dir();
    std::fs::create_dir_all(&dir)?;
    let summary = DiagnoseSummary {
        mse: diagnostics.mse,
        rmse: diagnostics.rmse,
        anchors: anchors.len(),
        gradient_audit_max_rel: audit,
        gradient_gate_passed: audit <= GRADIENT_GATE,
    };
    io::save_json(&dir.join("gradient_audit.json"), &summary)?;
    Ok(summary)
}
