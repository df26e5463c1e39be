// Temporary diagnostic probe for the solver (deleted before release).
use cm_mpc::constraints::ConstraintConfig;
use cm_mpc::gait::GaitSchedule;
use cm_mpc::model::{self, DynParams};
use cm_mpc::mpc::*;
use cm_mpc::objective::CostParams;
use cm_mpc::state::ReducedState;
use cm_mpc::valuation::ParamVector;
use nalgebra::{SVector, Vector3};

fn theta() -> ParamVector {
    let mut cost = CostParams::zeros();
    cost.state_weights = SVector::from_iterator([
        0.2, 0.2, 0.2, 1.0, 1.0, 1.0, 400.0, 400.0, 400.0, 80.0, 80.0, 80.0, 150.0, 150.0, 150.0,
        150.0, 150.0, 150.0,
    ]);
    cost.input_weights = SVector::from_iterator([
        2e-4, 2e-4, 1e-4, 2e-3, 2e-3, 2e-3, 2e-4, 2e-4, 1e-4, 2e-3, 2e-3, 2e-3, 0.5, 0.5, 0.5,
        0.5, 0.5, 0.5,
    ]);
    cost.terminal_weights = SVector::from_iterator([
        0.4, 0.4, 0.4, 2.0, 2.0, 2.0, 800.0, 800.0, 800.0, 160.0, 160.0, 160.0, 300.0, 300.0,
        300.0, 300.0, 300.0, 300.0,
    ]);
    cost.base_weights = SVector::repeat(2.0);
    cost.com_weights = SVector::repeat(50.0);
    cost.swing_weights = SVector::repeat(10.0);
    ParamVector {
        dynamics: DynParams::default_biped(),
        cost,
        stage_penalty: Default::default(),
        terminal_penalty: Default::default(),
    }
}


fn standing_probe() {
    use cm_mpc::state::ControlInput;
    let theta = theta();
    let nominal = NominalPose::default();
    let schedule = GaitSchedule::standing();
    let solver = SolverConfig { max_inner_iters: 3000, ..Default::default() };
    let cfg = ConstraintConfig::default();
    let mut s = ReducedState::standing(
        Vector3::new(0.0, 0.0, nominal.com_height),
        Vector3::new(0.0, nominal.stance_half_width, 0.0),
        Vector3::new(0.0, -nominal.stance_half_width, 0.0),
    );
    let pert: f64 = std::env::var("PERT").map(|v| v.parse().unwrap()).unwrap_or(0.15);
    s.lin_momentum.y = pert;
    s.base_pos.y = pert / 75.0;
    let plan = |t: f64| generate_references(&CommandVelocity::STAND, &schedule, &nominal, &theta.dynamics, t, solver.horizon, solver.dt);
    let p0 = plan(0.0);
    let zeros = vec![ControlInput::zero(); solver.horizon];
    let (_, cold_zero) = solve(&theta, &s, &p0, &solver, &cfg, Some(&zeros)).unwrap();
    let (us0, cold_ref) = solve(&theta, &s, &p0, &solver, &cfg, None).unwrap();
    let s1 = model::step(&s, &us0[0], &p0.stages[0].phase, &theta.dynamics, solver.dt).unwrap();
    let p1 = plan(solver.dt);
    let mut shifted: Vec<ControlInput> = us0[1..].to_vec();
    shifted.push(*us0.last().unwrap());
    let (_, warm) = solve(&theta, &s1, &p1, &solver, &cfg, Some(&shifted)).unwrap();
    println!("standing: cold_zero={} cold_ref={} warm={}", cold_zero.inner_iterations, cold_ref.inner_iterations, warm.inner_iterations);
}

fn main() {
    standing_probe();
    let theta = theta();
    let nominal = NominalPose::default();
    let schedule = GaitSchedule::walk_in_place(0.8, 0.04);
    let solver = SolverConfig { max_inner_iters: 3000, ..Default::default() };
    let cfg = ConstraintConfig::default();
    let mut s = ReducedState::standing(
        Vector3::new(0.0, 0.0, nominal.com_height),
        Vector3::new(0.0, nominal.stance_half_width, 0.0),
        Vector3::new(0.0, -nominal.stance_half_width, 0.0),
    );
    let mut ctrl = RecedingHorizonController::new(
        theta.clone(),
        schedule.clone(),
        cfg.clone(),
        solver.clone(),
        CommandVelocity::STAND,
        nominal.clone(),
    );
    let mut warm_iters = Vec::new();
    let mut cold_iters = Vec::new();
    for k in 0..80 {
        let t = k as f64 * solver.dt;
        let plan = generate_references(
            &CommandVelocity::STAND,
            &schedule,
            &nominal,
            &theta.dynamics,
            t,
            solver.horizon,
            solver.dt,
        );
        if k >= 5 {
            if let Ok((_, rep)) = solve(&theta, &s, &plan, &solver, &cfg, None) {
                cold_iters.push(rep.inner_iterations);
            }
        }
        let u = ctrl.policy_step(&s, t).unwrap();
        if k >= 5 {
            warm_iters.push(ctrl.last_report.as_ref().unwrap().inner_iterations);
        }
        let phase = schedule.phase_at(t);
        s = model::step(&s, &u, &phase, &theta.dynamics, solver.dt).unwrap();
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    println!(
        "walking: mean warm iters = {:.1}, mean cold iters = {:.1}, ratio = {:.3}",
        mean(&warm_iters),
        mean(&cold_iters),
        mean(&warm_iters) / mean(&cold_iters)
    );
    println!(
        "fail count = {}, base z drift = {:.4}",
        ctrl.solve_failures,
        (s.base_pos.z - nominal.com_height).abs()
    );
}

#[allow(dead_code)]
fn never() { unreachable!() }
