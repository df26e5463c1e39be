// Temporary pipeline probe (deleted before release): gain identifiability
// sweep, training descent, and benchmark direction.
use cm_mpc::bench;
use cm_mpc::config::{GaitPreset, RunConfig};
use cm_mpc::learner::{self, LearnConfig};
use cm_mpc::plant::{DisturbanceProfile, DisturbancePulse, Plant};
use cm_mpc::mpc::RecedingHorizonController;
use cm_mpc::run;
use cm_mpc::seeds;
use cm_mpc::valuation::{param_layout, ParamVector, Trajectory, PARAM_DIM};
use nalgebra::Vector3;

fn lateral_pushes() -> DisturbanceProfile {
    // Alternating lateral pushes exciting the y channel.
    let mut pulses = Vec::new();
    for k in 0..6 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        pulses.push(DisturbancePulse {
            start: 0.3 + k as f64 * 0.45,
            duration: 0.1,
            force: Vector3::new(0.0, sign * 14.0, 0.0),
            torque: Vector3::zeros(),
        });
    }
    DisturbanceProfile { pulses }
}

fn collect_plain(
    cfg: &RunConfig,
    theta: &ParamVector,
    episodes: usize,
    steps: usize,
) -> Vec<Trajectory> {
    let resolved = cfg.resolve().unwrap();
    (0..episodes)
        .map(|e| {
            let seed = seeds::derive(cfg.train.master_seed, 900 + e as u64);
            let mut init = resolved.initial_state;
            // Seeded lateral kick so even the standing gait excites y.
            let kick: f64 = std::env::var("PROBE_KICK").map(|v| v.parse().unwrap()).unwrap_or(1.5);
            init.lin_momentum.y = kick * if e % 2 == 0 { 1.0 } else { -1.0 };
            let mut plant = Plant::new(
                init,
                cfg.dt,
                resolved.nominal_dynamics.clone(),
                resolved.schedule.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
                resolved.task_weights.clone(),
                cfg.plant.resolve(seed).unwrap(),
                DisturbanceProfile::none(),
            )
            .unwrap();
            let mut controller = RecedingHorizonController::new(
                theta.clone(),
                resolved.schedule.clone(),
                resolved.constraints.clone(),
                cfg.solver.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
            );
            cm_mpc::plant::collect_rollout(&mut controller, &mut plant, steps).unwrap()
        })
        .collect()
}

#[allow(dead_code)]
fn collect_with_pushes(
    cfg: &RunConfig,
    theta: &ParamVector,
    episodes: usize,
    steps: usize,
) -> Vec<Trajectory> {
    let resolved = cfg.resolve().unwrap();
    (0..episodes)
        .map(|e| {
            let seed = seeds::derive(cfg.train.master_seed, 700 + e as u64);
            let mut plant = Plant::new(
                resolved.initial_state,
                cfg.dt,
                resolved.nominal_dynamics.clone(),
                resolved.schedule.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
                resolved.task_weights.clone(),
                cfg.plant.resolve(seed).unwrap(),
                lateral_pushes(),
            )
            .unwrap();
            let mut controller = RecedingHorizonController::new(
                theta.clone(),
                resolved.schedule.clone(),
                resolved.constraints.clone(),
                cfg.solver.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
            );
            cm_mpc::plant::collect_rollout(&mut controller, &mut plant, steps).unwrap()
        })
        .collect()
}

fn identifiability() {
    println!("== gain identifiability ==");
    let mut cfg = RunConfig::default();
    let gait: String = std::env::var("PROBE_GAIT").unwrap_or_else(|_| "walk".into());
    cfg.gait.preset = if gait == "walk" { GaitPreset::WalkInPlace } else { GaitPreset::Standing };
    cfg.plant.gain_lin = [1.0, 0.85, 1.0];
    cfg.plant.gain_ang = [1.0, 1.0, 1.0];
    cfg.plant.actuator_tau = 0.0;
    cfg.learner.discount = std::env::var("PROBE_GAMMA").map(|v| v.parse().unwrap()).unwrap_or(0.95);
    if let Ok(n) = std::env::var("PROBE_N") {
        // Valuation horizon only: collection keeps the fast deployment N.
        let n: usize = n.parse().unwrap();
        cfg.learner.horizon = n;
    }
    // Task cost emphasizing momentum tracking for identification.
    if std::env::var("PROBE_MOMENTUM_TASK").is_ok() {
        cfg.task_cost.state_weights[0] = 1.0;
        cfg.task_cost.state_weights[1] = 1.0;
        cfg.task_cost.state_weights[2] = 1.0;
    }
    let resolved = cfg.resolve().unwrap();

    let mut theta = resolved.theta0.clone();
    // Surrogate cost = task cost family, zero terminal.
    theta.cost = resolved.task_weights.clone();
    theta.cost.terminal_weights = nalgebra::SVector::zeros();

    let t0 = std::time::Instant::now();
    let steps: usize = std::env::var("PROBE_STEPS").map(|v| v.parse().unwrap()).unwrap_or(300);
    let dataset = collect_plain(&cfg, &theta, 4, steps);
    println!(
        "collected {} episodes x {} steps in {:.1}s",
        dataset.len(),
        dataset[0].len(),
        t0.elapsed().as_secs_f64()
    );

    let targets = learner::measured_returns(&dataset, cfg.learner.discount);
    let anchors = learner::valid_anchors(&dataset, cfg.learner.horizon);
    let ccfg = resolved.constraints.clone();

    // Brute-force sweep of the loss over the y linear gain.
    let mut best = (f64::INFINITY, 0.0);
    let mut curve = Vec::new();
    for i in 0..=140 {
        let g = 0.5 + i as f64 * 0.005;
        let mut th = theta.clone();
        th.dynamics.gain_lin.y = g;
        let loss =
            learner::matching_loss(&th, &dataset, &targets, &anchors, cfg.learner.horizon, &ccfg)
                .unwrap();
        curve.push((g, loss));
        if loss < best.0 {
            best = (loss, g);
        }
    }
    println!("sweep minimizer: gain_y = {:.3} (loss {:.4e})", best.1, best.0);
    for (g, l) in curve.iter().step_by(20) {
        println!("  g={g:.3} loss={l:.5e}");
    }

    // Frozen-except-lateral-gain training with stage-wise step sizes.
    let mut mask = vec![false; PARAM_DIM];
    mask[param_layout::GAIN_LIN.start + 1] = true;
    let mut current = theta.clone();
    for stage in 0..3 {
        let learn = LearnConfig {
            discount: cfg.learner.discount,
            horizon: cfg.learner.horizon,
            batch_size: 64,
            updates_per_round: 200,
            learn_mask: Some(mask.clone()),
            rng_seed: 5 + stage,
            ..Default::default()
        };
        let (after, diag) = learner::train_round(&current, &dataset, &learn, &ccfg).unwrap();
        println!(
            "stage {stage}: L_hat {:.3e}, gain_y {:.4} (loss {:.3e} -> {:.3e})",
            diag.smoothness_estimate.unwrap_or(0.0),
            after.dynamics.gain_lin.y,
            diag.update_losses.first().unwrap(),
            diag.update_losses.last().unwrap()
        );
        current = after;
    }
    println!("final gain_y = {:.4}", current.dynamics.gain_lin.y);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn training_descent() {
    println!("== training rounds (walk gait, full theta) ==");
    let mut cfg = RunConfig::default();
    cfg.run_id = "probe-train".into();
    cfg.output_dir = std::env::temp_dir().join("cm_mpc_probe");
    let _ = std::fs::remove_dir_all(&cfg.output_dir);
    cfg.gait.preset = GaitPreset::WalkInPlace;
    cfg.learner.rounds = std::env::var("PROBE_ROUNDS").map(|v| v.parse().unwrap()).unwrap_or(3);
    cfg.learner.updates_per_round = 200;
    if let Ok(n) = std::env::var("PROBE_TRAIN_N") {
        cfg.learner.horizon = n.parse().unwrap();
    }
    cfg.train.episodes_per_round = 4;
    cfg.train.episode_steps = 300;
    let t0 = std::time::Instant::now();
    let summary = run::cmd_train(&cfg).unwrap();
    for (j, (pre, post)) in summary.val_mse_pre.iter().zip(&summary.val_mse_post).enumerate() {
        let diag: cm_mpc::learner::RoundDiagnostics = cm_mpc::io::load_json(
            &run::RunPaths::new(&cfg).round_diagnostics(j),
        )
        .unwrap();
        println!(
            "round {j}: val MSE {:?} -> {:?} | L_hat {:?} alpha {:.2e} gains {:?}",
            pre,
            post,
            diag.smoothness_estimate,
            diag.step_size_used,
            &diag.theta_after[0..6]
        );
    }
    println!("train elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn benchmark_direction() {
    println!("== benchmark direction ==");
    let mut cfg = RunConfig::default();
    cfg.run_id = "probe-bench".into();
    cfg.output_dir = std::env::temp_dir().join("cm_mpc_probe");
    let gait: String = std::env::var("PROBE_BENCH_GAIT").unwrap_or_else(|_| "walk".into());
    cfg.gait.preset = if gait == "walk" { GaitPreset::WalkInPlace } else { GaitPreset::Standing };
    if std::env::var("PROBE_Z_EXACT").is_ok() {
        cfg.plant.gain_lin = [0.85, 0.85, 1.0];
    }
    cfg.benchmark.trial_seeds = vec![11, 12];
    let resolved = cfg.resolve().unwrap();
    let scenario = run::bench_scenario(&cfg, &resolved).unwrap();
    let t0 = std::time::Instant::now();
    // Learned parameters from the training probe when available.
    let mut learned = std::env::var("PROBE_THETA")
        .ok()
        .map(|p| cm_mpc::io::load_theta(std::path::Path::new(&p)).unwrap().theta)
        .unwrap_or_else(|| resolved.theta0.clone());
    if std::env::var("PROBE_ORACLE_GAINS").is_ok() {
        learned = resolved.theta0.clone();
        learned.dynamics.gain_lin = Vector3::new(
            cfg.plant.gain_lin[0],
            cfg.plant.gain_lin[1],
            cfg.plant.gain_lin[2],
        );
        learned.dynamics.gain_ang = Vector3::new(
            cfg.plant.gain_ang[0],
            cfg.plant.gain_ang[1],
            cfg.plant.gain_ang[2],
        );
    }
    let report =
        bench::compare_controllers(&resolved.theta0, &learned, &[11, 12], &scenario).unwrap();
    println!("{}", report.render_table());
    println!("bench elapsed {:.1}s", t0.elapsed().as_secs_f64());
}


fn theta_star() {
    println!("== theta* via gain-masked cost matching ==");
    let mut cfg = RunConfig::default();
    cfg.gait.preset = GaitPreset::Standing;
    cfg.plant.gain_lin = [1.0, 0.85, 1.0];
    cfg.plant.gain_ang = [1.0, 1.0, 0.88];
    cfg.plant.actuator_tau = 0.0;
    cfg.learner.discount = 1.0;
    cfg.learner.horizon = 120;
    cfg.task_cost.state_weights[0] = 1.0;
    cfg.task_cost.state_weights[1] = 1.0;
    cfg.task_cost.state_weights[2] = 1.0;
    let resolved = cfg.resolve().unwrap();

    let mut theta = resolved.theta0.clone();
    theta.cost = resolved.task_weights.clone();
    theta.cost.terminal_weights = nalgebra::SVector::zeros();

    // Kick set exciting the lateral, sagittal, and yaw channels.
    let t0 = std::time::Instant::now();
    let dataset: Vec<Trajectory> = (0..6)
        .map(|e| {
            let seed = seeds::derive(cfg.train.master_seed, 1700 + e as u64);
            let mut init = resolved.initial_state;
            match e % 2 {
                0 => init.lin_momentum.y = 5.0 * if e % 4 == 0 { 1.0 } else { -1.0 },
                _ => {
                    init.ang_momentum.z = 0.35 * if (e + 1) % 4 == 0 { 1.0 } else { -1.0 };
                    init.lin_momentum.y = -2.5;
                }
            }
            let mut plant = Plant::new(
                init,
                cfg.dt,
                resolved.nominal_dynamics.clone(),
                resolved.schedule.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
                resolved.task_weights.clone(),
                cfg.plant.resolve(seed).unwrap(),
                DisturbanceProfile::none(),
            )
            .unwrap();
            let mut controller = RecedingHorizonController::new(
                theta.clone(),
                resolved.schedule.clone(),
                resolved.constraints.clone(),
                cfg.solver.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
            );
            cm_mpc::plant::collect_rollout(&mut controller, &mut plant, 180).unwrap()
        })
        .collect();
    println!("collected 6 episodes in {:.1}s", t0.elapsed().as_secs_f64());

    // Which episode's replay is fragile at the initial gains?
    for (e, traj) in dataset.iter().enumerate() {
        let seg = traj.segment(0, cfg.learner.horizon).unwrap();
        match cm_mpc::valuation::q_mpc(&theta, &traj.records[0].state, &seg, &resolved.constraints) {
            Ok(eval) => {
                let max_pitch = eval
                    .predicted_states
                    .iter()
                    .map(|s| s.base_euler[1].abs())
                    .fold(0.0, f64::max);
                println!("episode {e}: ok, max |pitch| = {max_pitch:.3}");
            }
            Err(err) => println!("episode {e}: replay failed: {err}"),
        }
    }
    let mut mask = vec![false; PARAM_DIM];
    mask[param_layout::GAIN_LIN.start + 1] = true; // lin y
    mask[param_layout::GAIN_ANG.start + 2] = true; // ang z

    let ccfg = resolved.constraints.clone();
    let mut current = theta.clone();
    for stage in 0..4 {
        let learn = LearnConfig {
            discount: cfg.learner.discount,
            horizon: cfg.learner.horizon,
            batch_size: 64,
            updates_per_round: 200,
            learn_mask: Some(mask.clone()),
            rng_seed: 15 + stage,
            ..Default::default()
        };
        let (after, diag) = learner::train_round(&current, &dataset, &learn, &ccfg).unwrap();
        println!(
            "stage {stage}: L_hat {:.2e} loss {:.3e} -> {:.3e}\n  lin {:?}\n  ang {:?}",
            diag.smoothness_estimate.unwrap_or(0.0),
            diag.update_losses.first().unwrap(),
            diag.update_losses.last().unwrap(),
            after.dynamics.gain_lin,
            after.dynamics.gain_ang
        );
        current = after;
    }
    println!("identification elapsed {:.1}s", t0.elapsed().as_secs_f64());

    // Deploy: benchmark against the same z-exact plant, standing gait.
    let mut bench_cfg = cfg.clone();
    bench_cfg.benchmark.trial_seeds = vec![11, 12];
    let resolved_b = bench_cfg.resolve().unwrap();
    let scenario = run::bench_scenario(&bench_cfg, &resolved_b).unwrap();
    let mut learned_theta = resolved_b.theta0.clone();
    learned_theta.dynamics.gain_lin = current.dynamics.gain_lin;
    learned_theta.dynamics.gain_ang = current.dynamics.gain_ang;
    let report =
        bench::compare_controllers(&resolved_b.theta0, &learned_theta, &[11, 12], &scenario)
            .unwrap();
    println!("{}", report.render_table());
    println!("total elapsed {:.1}s", t0.elapsed().as_secs_f64());
}


fn descent_200() {
    println!("== theorem-style 200-iteration full-batch descent (realizable) ==");
    let mut cfg = RunConfig::default();
    cfg.gait.preset = GaitPreset::Standing;
    cfg.plant.gain_lin = [1.0, 1.0, 1.0];
    cfg.plant.gain_ang = [1.0, 1.0, 1.0];
    cfg.plant.actuator_tau = 0.0;
    cfg.learner.discount = 1.0;
    cfg.learner.horizon = 100;
    cfg.task_cost.state_weights[0] = 1.0;
    cfg.task_cost.state_weights[1] = 1.0;
    cfg.task_cost.state_weights[2] = 1.0;
    let resolved = cfg.resolve().unwrap();

    // Collection controller: surrogate family at the task weights.
    let mut theta_collect = resolved.theta0.clone();
    theta_collect.cost = resolved.task_weights.clone();
    theta_collect.cost.terminal_weights = nalgebra::SVector::zeros();

    let t0 = std::time::Instant::now();
    let dataset: Vec<Trajectory> = (0..2)
        .map(|e| {
            let seed = seeds::derive(cfg.train.master_seed, 2500 + e as u64);
            let mut init = resolved.initial_state;
            if e % 2 == 0 {
                init.lin_momentum.y = 4.0;
            } else {
                init.lin_momentum.x = 3.0;
            }
            let mut plant = Plant::new(
                init,
                cfg.dt,
                resolved.nominal_dynamics.clone(),
                resolved.schedule.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
                resolved.task_weights.clone(),
                cfg.plant.resolve(seed).unwrap(),
                DisturbanceProfile::none(),
            )
            .unwrap();
            let mut controller = RecedingHorizonController::new(
                theta_collect.clone(),
                resolved.schedule.clone(),
                resolved.constraints.clone(),
                cfg.solver.clone(),
                resolved.command,
                resolved.nominal_pose.clone(),
            );
            cm_mpc::plant::collect_rollout(&mut controller, &mut plant, 140).unwrap()
        })
        .collect();
    println!("collected in {:.1}s", t0.elapsed().as_secs_f64());

    // Descent starts from inflated weights; the realizable optimum is
    // interior (task weights, unit gains).
    let mut theta = theta_collect.clone();
    theta.cost.state_weights *= 3.0;
    theta.cost.input_weights *= 3.0;
    theta.cost.base_weights *= 3.0;
    theta.cost.com_weights *= 3.0;
    theta.cost.swing_weights *= 3.0;
    theta.cost.torque_weights *= 3.0;

    // Keep the gains frozen at their true values: the loss is then exactly
    // quadratic over the descent path.
    let mut mask = vec![true; PARAM_DIM];
    for j in param_layout::GAIN_LIN.chain(param_layout::GAIN_ANG) {
        mask[j] = false;
    }
    // Floor-bump the near-zero blocks so 200 projected steps stay interior.
    for j in 0..18 {
        theta.cost.input_weights[j] = theta.cost.input_weights[j].max(0.02);
    }
    for j in 0..3 {
        theta.cost.torque_weights[j] = theta.cost.torque_weights[j].max(0.02);
    }
    let ccfg = resolved.constraints.clone();
    let learn = LearnConfig {
        horizon: cfg.learner.horizon,
        discount: 1.0,
        auto_step_size: false,
        learn_mask: Some(mask),
        ..Default::default()
    };
    let anchors = learner::valid_anchors(&dataset, learn.horizon);
    let targets = learner::measured_returns(&dataset, learn.discount);
    let l_hat = learner::estimate_smoothness(&theta, &dataset, 6, 11, &learn, &ccfg).unwrap();
    let alpha = 1.0 / l_hat;
    println!("anchors {}, L_hat {:.3e}, alpha {:.3e}", anchors.len(), l_hat, alpha);

    let step_cfg = LearnConfig { step_size: alpha, ..learn.clone() };
    let mut current = theta.clone();
    let mut flat = current.flatten();
    let mut losses = Vec::new();
    let mut grad_sq = Vec::new();
    let mut clamped = 0usize;
    let bounds = step_cfg.lower_bounds();
    for _ in 0..200 {
        let (grad, loss) =
            learner::loss_gradient(&current, &dataset, &targets, &anchors, learn.horizon, &ccfg).unwrap();
        losses.push(loss);
        grad_sq.push(grad.norm_squared());
        let next = learner::sgd_step(&flat, &grad, &step_cfg);
        for j in 0..next.len() {
            if next[j] == bounds[j] && flat[j] != bounds[j] {
                clamped += 1;
                println!("  clamp: coord {j} ({})", cm_mpc::valuation::param_layout::block_of(j));
            }
        }
        flat = next;
        current.assign_flat(&flat);
    }
    let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
    let l_min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let avg_grad_sq: f64 = grad_sq.iter().sum::<f64>() / grad_sq.len() as f64;
    let bound = 2.0 * (losses[0] - l_min) / (alpha * 200.0) * 1.10;
    println!(
        "violations {}, clamped coords {}, loss {:.4e} -> {:.4e}, avg|g|^2 {:.4e} vs bound {:.4e} ({})",
        violations,
        clamped,
        losses[0],
        losses.last().unwrap(),
        avg_grad_sq,
        bound,
        if avg_grad_sq <= bound { "OK" } else { "FAIL" }
    );
    println!("descent elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    match which.as_str() {
        "ident" => identifiability(),
        "train" => training_descent(),
        "bench" => benchmark_direction(),
        "star" => theta_star(),
        "descent" => descent_200(),
        _ => {
            identifiability();
            training_descent();
            benchmark_direction();
        }
    }
}
