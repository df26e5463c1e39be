//! Deployment-time receding-horizon solver and walking reference
//! generation.
//!
//! The solver is deliberately dependency-free: single shooting over the N
//! inputs, projected gradient descent with backtracking for the inner
//! loop, and an escalating quadratic penalty on the state-related
//! constraints for the outer loop. Input constraints are enforced exactly
//! by [`crate::constraints::project_input`] after every candidate step, so
//! every returned input is hard-feasible by construction. The learning
//! loop never calls this module.

use std::time::Instant;

use nalgebra::{DVector, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintConfig, PenaltyWeights};
use crate::error::Error;
use crate::gait::{ContactMode, GaitSchedule, PhasePair, SupportSegment};
use crate::instrument;
use crate::model::{self, DynParams};
use crate::objective::{self, ReferencePoint};
use crate::state::{ControlInput, ReducedState, Side};
use crate::valuation::ParamVector;
use crate::Result;

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Model step, s (must match the plant step).
    pub dt: f64,
    /// Cap on processed penalty stages (normally the schedule length).
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Strictly increasing state-constraint penalty weights.
    pub penalty_schedule: Vec<f64>,
    /// Inner-loop termination on the projected step norm, measured in the
    /// preconditioner (curvature) metric.
    pub convergence_tol: f64,
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.01,
            max_outer_iters: 3,
            max_inner_iters: 60,
            penalty_schedule: vec![1e2, 1e3, 1e4],
            convergence_tol: 1e-4,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("solver horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("solver dt must be positive".into()));
        }
        if self.penalty_schedule.is_empty()
            || self.penalty_schedule.windows(2).any(|w| w[1] <= w[0])
            || self.penalty_schedule.iter().any(|r| *r <= 0.0)
        {
            return Err(Error::Config("penalty schedule must be positive and strictly increasing".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Commanded planar velocity and yaw rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandVelocity {
    pub linear: Vector2<f64>,
    pub yaw_rate: f64,
}

impl CommandVelocity {
    pub const STAND: CommandVelocity = CommandVelocity {
        linear: Vector2::new(0.0, 0.0),
        yaw_rate: 0.0,
    };
}

/// Nominal standing geometry the references are built around.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalPose {
    /// CoM height over the ground, m.
    pub com_height: f64,
    /// Lateral half-distance between the feet, m.
    pub stance_half_width: f64,
    /// World origin the command velocity integrates from.
    pub origin_xy: Vector2<f64>,
    /// Extra velocity-proportional footstep offset, s.
    pub step_velocity_gain: f64,
}

impl Default for NominalPose {
    fn default() -> Self {
        Self {
            com_height: 0.75,
            stance_half_width: 0.12,
            origin_xy: Vector2::new(0.0, 0.0),
            step_velocity_gain: 0.0,
        }
    }
}

/// One stage of a reference plan.
#[derive(Clone, Debug)]
pub struct PlanStage {
    pub reference: ReferencePoint,
    pub phase: PhasePair,
}

/// Per-stage references plus the terminal state reference.
#[derive(Clone, Debug)]
pub struct ReferencePlan {
    pub stages: Vec<PlanStage>,
    pub terminal_state: ReducedState,
    pub t0: f64,
    pub dt: f64,
}

fn rotate_xy(v: Vector2<f64>, yaw: f64) -> Vector2<f64> {
    let (s, c) = yaw.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

fn com_xy_at(command: &CommandVelocity, nominal: &NominalPose, t: f64) -> Vector2<f64> {
    nominal.origin_xy + command.linear * t
}

fn lateral_offset(side: Side, nominal: &NominalPose, yaw: f64) -> Vector2<f64> {
    let sign = match side {
        Side::Left => 1.0,
        Side::Right => -1.0,
    };
    rotate_xy(Vector2::new(0.0, sign * nominal.stance_half_width), yaw)
}

/// Planned ground position for the stance segment centered at `t_center`.
fn step_target(
    side: Side,
    command: &CommandVelocity,
    nominal: &NominalPose,
    t_center: f64,
) -> Vector2<f64> {
    let yaw = command.yaw_rate * t_center;
    com_xy_at(command, nominal, t_center)
        + lateral_offset(side, nominal, yaw)
        + command.linear * nominal.step_velocity_gain
}

/// Reference position/velocity of one foot at absolute time `t`.
fn foot_reference(
    side: Side,
    command: &CommandVelocity,
    nominal: &NominalPose,
    schedule: &GaitSchedule,
    t: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let nudge = schedule.neighbor_nudge();
    match schedule.support_segment(side, t) {
        SupportSegment::Constant(_) => {
            // Foot never changes mode: permanent nominal placement.
            let yaw0 = 0.0;
            let xy = nominal.origin_xy + lateral_offset(side, nominal, yaw0);
            (Vector3::new(xy.x, xy.y, 0.0), Vector3::zeros())
        }
        SupportSegment::Bounded { mode: ContactMode::Stance, start, end } => {
            let xy = step_target(side, command, nominal, 0.5 * (start + end));
            (Vector3::new(xy.x, xy.y, 0.0), Vector3::zeros())
        }
        SupportSegment::Bounded { mode: ContactMode::Swing, start, end } => {
            let duration = end - start;
            let fraction = ((t - start) / duration).clamp(0.0, 1.0);
            let prev_xy = match schedule.support_segment(side, start - nudge) {
                SupportSegment::Bounded { start: ps, end: pe, .. } => {
                    step_target(side, command, nominal, 0.5 * (ps + pe))
                }
                SupportSegment::Constant(_) => nominal.origin_xy + lateral_offset(side, nominal, 0.0),
            };
            let next_xy = match schedule.support_segment(side, end + nudge) {
                SupportSegment::Bounded { start: ns, end: ne, .. } => {
                    step_target(side, command, nominal, 0.5 * (ns + ne))
                }
                SupportSegment::Constant(_) => nominal.origin_xy + lateral_offset(side, nominal, 0.0),
            };
            let xy = prev_xy + (next_xy - prev_xy) * fraction;
            let z = schedule.swing_height(fraction, duration);
            let vel_xy = (next_xy - prev_xy) / duration;
            let vel_z = schedule.swing_vz(fraction);
            (
                Vector3::new(xy.x, xy.y, z),
                Vector3::new(vel_xy.x, vel_xy.y, vel_z),
            )
        }
    }
}

/// Full reference point (state, input, foot targets) at absolute time `t`.
pub fn reference_point(
    command: &CommandVelocity,
    schedule: &GaitSchedule,
    nominal: &NominalPose,
    dyn_params: &DynParams,
    t: f64,
) -> ReferencePoint {
    let phase = schedule.phase_at(t);
    let com = com_xy_at(command, nominal, t);
    let yaw = command.yaw_rate * t;

    let mut foot_pos = [Vector3::zeros(); 2];
    let mut foot_vel = [Vector3::zeros(); 2];
    for side in Side::BOTH {
        let (p, v) = foot_reference(side, command, nominal, schedule, t);
        foot_pos[side.index()] = p;
        foot_vel[side.index()] = v;
    }

    let state = ReducedState {
        lin_momentum: Vector3::new(
            dyn_params.mass * command.linear.x,
            dyn_params.mass * command.linear.y,
            0.0,
        ),
        ang_momentum: Vector3::new(0.0, 0.0, dyn_params.inertia.z * command.yaw_rate),
        base_pos: Vector3::new(com.x, com.y, nominal.com_height),
        base_euler: Vector3::new(0.0, 0.0, yaw),
        foot_pos,
    };

    let stance_count = phase.stance_count().max(1);
    let fz = -dyn_params.mass * dyn_params.gravity.z / stance_count as f64;
    let mut input = ControlInput::zero();
    for side in Side::BOTH {
        let i = side.index();
        if phase.is_stance(side) {
            input.force[i].z = fz;
        }
        input.foot_vel[i] = foot_vel[i];
    }

    ReferencePoint { state, input, foot_pos, foot_vel }
}

/// Deterministic reference plan over the horizon starting at `t0`.
pub fn generate_references(
    command: &CommandVelocity,
    schedule: &GaitSchedule,
    nominal: &NominalPose,
    dyn_params: &DynParams,
    t0: f64,
    n: usize,
    dt: f64,
) -> ReferencePlan {
    let stages = (0..n)
        .map(|i| {
            let t = t0 + i as f64 * dt;
            PlanStage {
                reference: reference_point(command, schedule, nominal, dyn_params, t),
                phase: schedule.phase_at(t),
            }
        })
        .collect();
    let terminal_state =
        reference_point(command, schedule, nominal, dyn_params, t0 + n as f64 * dt).state;
    ReferencePlan { stages, terminal_state, t0, dt }
}

/// Outcome summary of one solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub cost: f64,
    pub max_state_residual: f64,
    pub inner_iterations: usize,
    pub outer_stages: usize,
    pub converged: bool,
    /// Max state residual recorded after each outer penalty stage.
    pub per_stage_residuals: Vec<f64>,
    /// Wall time, s. Diagnostic only; never persisted in artifacts.
    pub wall_time_s: f64,
}

fn project_sequence(us: &mut [ControlInput], plan: &ReferencePlan, cfg: &ConstraintConfig) {
    for (u, stage) in us.iter_mut().zip(plan.stages.iter()) {
        *u = constraints::project_input(u, &stage.phase, cfg);
    }
}

/// Rollout + penalized objective. Returns the cost and the state sweep.
fn penalized_objective(
    theta: &ParamVector,
    s: &ReducedState,
    plan: &ReferencePlan,
    us: &[ControlInput],
    rho: f64,
    cfg: &ConstraintConfig,
) -> Result<(f64, Vec<ReducedState>)> {
    let w = PenaltyWeights::uniform(rho);
    let mut x = *s;
    let mut states = Vec::with_capacity(us.len() + 1);
    states.push(x);
    let mut cost = 0.0;
    for (i, (u, stage)) in us.iter().zip(plan.stages.iter()).enumerate() {
        cost += objective::stage_cost(&x, u, &stage.reference, &stage.phase, &theta.cost, &theta.dynamics)
            .map_err(|e| e.at_stage(i))?;
        let res = constraints::residuals(&x, u, &stage.phase, &stage.reference, cfg)
            .map_err(|e| e.at_stage(i))?;
        cost += constraints::penalty(&res, &w)?;
        x = model::step(&x, u, &stage.phase, &theta.dynamics, plan.dt).map_err(|e| e.at_stage(i))?;
        states.push(x);
    }
    cost += objective::terminal_cost(&x, &plan.terminal_state, &theta.cost)?;
    let term_res = constraints::terminal_residuals(&x, cfg)?;
    cost += constraints::penalty(&term_res, &w)?;
    Ok((cost, states))
}

/// Adjoint gradient of [`penalized_objective`] with respect to the inputs.
fn objective_gradient(
    theta: &ParamVector,
    plan: &ReferencePlan,
    us: &[ControlInput],
    states: &[ReducedState],
    rho: f64,
    cfg: &ConstraintConfig,
) -> Result<Vec<SVector<f64, 18>>> {
    let n = us.len();
    let w = PenaltyWeights::uniform(rho);
    let x_n = &states[n];
    let term = objective::terminal_partials(x_n, &plan.terminal_state, &theta.cost)?;
    let mut lambda = term.wrt_state + constraints::terminal_penalty_gradient(x_n, cfg, &w)?;

    let mut grads = vec![SVector::<f64, 18>::zeros(); n];
    for i in (0..n).rev() {
        let stage = &plan.stages[i];
        let xi = &states[i];
        let ui = &us[i];
        let cp = objective::cost_partials(xi, ui, &stage.reference, &stage.phase, &theta.cost, &theta.dynamics)?;
        let (pen_dx, pen_du) =
            constraints::penalty_gradient(xi, ui, &stage.phase, &stage.reference, cfg, &w)?;
        let parts = model::step_partials(xi, ui, &stage.phase, &theta.dynamics, plan.dt)?;
        grads[i] = cp.wrt_input + pen_du + parts.wrt_input.transpose() * lambda;
        lambda = cp.wrt_state + pen_dx + parts.wrt_state.transpose() * lambda;
    }
    Ok(grads)
}

/// Exact diagonal of the stage-cost Hessian with respect to the state,
/// evaluated at the reference (all cost terms are quadratic; the torque
/// term uses the reference wrench).
fn state_cost_hessian_diag(theta: &ParamVector, stage: &PlanStage) -> SVector<f64, 18> {
    use crate::state::state_index;
    let c = &theta.cost;
    let mut w = SVector::<f64, 18>::zeros();
    for j in 0..18 {
        w[j] = 2.0 * c.state_weights[j];
    }
    for j in 0..3 {
        w[state_index::BASE_EULER + j] += 2.0 * c.base_weights[j];
        let inertia = theta.dynamics.inertia[j];
        w[state_index::H_ANG + j] += 2.0 * c.base_weights[3 + j] / (inertia * inertia);
    }
    for j in 0..2 {
        w[state_index::BASE_POS + j] += 2.0 * c.com_weights[j];
        w[state_index::FOOT[0] + j] += 0.5 * c.com_weights[j];
        w[state_index::FOOT[1] + j] += 0.5 * c.com_weights[j];
    }
    for side in Side::BOTH {
        let i = side.index();
        if stage.phase.is_swing(side) {
            for j in 0..3 {
                w[state_index::FOOT[i] + j] += 2.0 * c.swing_weights[6 * i + j];
            }
        } else {
            // tau = r x f + m with d tau/d r = -[f]x.
            let f = stage.reference.input.force[i];
            let tw = &c.torque_weights;
            let g = [
                tw[1] * f.z * f.z + tw[2] * f.y * f.y,
                tw[0] * f.z * f.z + tw[2] * f.x * f.x,
                tw[0] * f.y * f.y + tw[1] * f.x * f.x,
            ];
            for j in 0..3 {
                w[state_index::FOOT[i] + j] += 2.0 * g[j];
                w[state_index::BASE_POS + j] += 2.0 * g[j];
            }
        }
    }
    w
}

/// Direct input-coordinate curvature of one stage (input weights, torque
/// regularizer at the reference moment arm, swing tracking weights, and
/// the active penalty weight on penalized input channels).
fn direct_input_curvature(theta: &ParamVector, stage: &PlanStage, rho: f64) -> SVector<f64, 18> {
    use crate::state::input_index;
    let c = &theta.cost;
    let mut curv = SVector::<f64, 18>::zeros();
    for j in 0..18 {
        curv[j] = 2.0 * c.input_weights[j];
    }
    for side in Side::BOTH {
        let i = side.index();
        if stage.phase.is_stance(side) {
            let r = stage.reference.state.foot_pos[i] - stage.reference.state.base_pos;
            let w = &c.torque_weights;
            let g = [
                w[1] * r.z * r.z + w[2] * r.y * r.y,
                w[0] * r.z * r.z + w[2] * r.x * r.x,
                w[0] * r.y * r.y + w[1] * r.x * r.x,
            ];
            for j in 0..3 {
                curv[input_index::FORCE[i] + j] += 2.0 * g[j];
                curv[input_index::MOMENT[i] + j] += 2.0 * w[j];
                curv[input_index::FOOT_VEL[i] + j] += 2.0 * rho;
            }
        } else {
            for j in 0..3 {
                curv[input_index::FORCE[i] + j] += 2.0 * rho;
                curv[input_index::MOMENT[i] + j] += 2.0 * rho;
                curv[input_index::FOOT_VEL[i] + j] += 2.0 * c.swing_weights[6 * i + 3 + j];
            }
            curv[input_index::FOOT_VEL[i] + 2] += 2.0 * rho;
        }
    }
    curv
}

/// Gauss-Newton diagonal preconditioner: per-stage inverse curvature of
/// the condensed objective with respect to each input coordinate. The
/// state-tracking curvature is propagated backward along the reference
/// with the cost-to-go Hessian recursion `M_i = W_i + A_i^T M_{i+1} A_i`,
/// and each input picks up `diag(B_i^T M_{i+1} B_i)` plus its direct
/// stage-cost curvature.
fn input_preconditioner(
    theta: &ParamVector,
    plan: &ReferencePlan,
    rho: f64,
) -> Result<Vec<SVector<f64, 18>>> {
    let n = plan.stages.len();
    let mut partials = Vec::with_capacity(n);
    for stage in &plan.stages {
        partials.push(model::step_partials(
            &stage.reference.state,
            &stage.reference.input,
            &stage.phase,
            &theta.dynamics,
            plan.dt,
        )?);
    }

    let mut m = nalgebra::SMatrix::<f64, 18, 18>::zeros();
    for j in 0..18 {
        m[(j, j)] = 2.0 * theta.cost.terminal_weights[j];
    }
    let mut out = vec![SVector::<f64, 18>::zeros(); n];
    for i in (0..n).rev() {
        let stage = &plan.stages[i];
        let b = &partials[i].wrt_input;
        let mb = m * b;
        let mut curv = direct_input_curvature(theta, stage, rho);
        for j in 0..18 {
            curv[j] += b.column(j).dot(&mb.column(j));
        }
        out[i] = SVector::<f64, 18>::from_fn(|j, _| 1.0 / curv[j].max(1e-4));

        let a = &partials[i].wrt_state;
        m = a.transpose() * m * a;
        let w = state_cost_hessian_diag(theta, stage);
        for j in 0..18 {
            m[(j, j)] += w[j];
        }
    }
    Ok(out)
}

/// Max state-constraint violation along the rollout (inputs are
/// projection-feasible, so only state-related entries can be nonzero).
fn max_state_residual(
    plan: &ReferencePlan,
    us: &[ControlInput],
    states: &[ReducedState],
    cfg: &ConstraintConfig,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (i, (u, stage)) in us.iter().zip(plan.stages.iter()).enumerate() {
        let res = constraints::residuals(&states[i], u, &stage.phase, &stage.reference, cfg)?;
        worst = worst.max(res.max_violation());
    }
    let term = constraints::terminal_residuals(&states[us.len()], cfg)?;
    Ok(worst.max(term.max_violation()))
}

fn flatten_sequence(us: &[ControlInput]) -> DVector<f64> {
    let mut v = DVector::zeros(us.len() * 18);
    for (i, u) in us.iter().enumerate() {
        v.rows_mut(i * 18, 18).copy_from(&u.to_vector());
    }
    v
}

/// Single-shooting penalty solve of the horizon problem.
///
/// Decision variables are the N inputs. Outer loop escalates the state
/// penalty weight over the schedule; the inner loop is projected gradient
/// descent with backtracking (halve until decrease). Inputs are projected
/// onto the hard input set after every trial step, so any returned
/// sequence is input-feasible regardless of convergence.
pub fn solve(
    theta: &ParamVector,
    s: &ReducedState,
    plan: &ReferencePlan,
    solver: &SolverConfig,
    cfg: &ConstraintConfig,
    warm: Option<&[ControlInput]>,
) -> Result<(Vec<ControlInput>, SolveReport)> {
    instrument::count_mpc_solve();
    let started = Instant::now();
    let n = plan.stages.len();

    let mut us: Vec<ControlInput> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => plan.stages.iter().map(|st| st.reference.input).collect(),
    };
    project_sequence(&mut us, plan, cfg);

    // A diverging warm start falls back to the reference inputs.
    if penalized_objective(theta, s, plan, &us, solver.penalty_schedule[0], cfg).is_err() {
        us = plan.stages.iter().map(|st| st.reference.input).collect();
        project_sequence(&mut us, plan, cfg);
    }

    let mut total_inner = 0usize;
    let mut converged = false;
    let mut per_stage_residuals = Vec::new();
    let mut final_states: Option<Vec<ReducedState>> = None;

    let outer = solver.penalty_schedule.len().min(solver.max_outer_iters.max(1));
    for &rho in &solver.penalty_schedule[..outer] {
        let (mut j_cur, mut states) = penalized_objective(theta, s, plan, &us, rho, cfg)?;
        let precond = input_preconditioner(theta, plan, rho)?;
        let mut eta = 1.0_f64;
        converged = false;

        let mut prev_point: Option<(DVector<f64>, DVector<f64>)> = None;
        for _ in 0..solver.max_inner_iters {
            let grads = objective_gradient(theta, plan, &us, &states, rho, cfg)?;
            let us_flat = flatten_sequence(&us);
            let mut g_flat = DVector::zeros(us.len() * 18);
            for (i, g) in grads.iter().enumerate() {
                g_flat.rows_mut(i * 18, 18).copy_from(g);
            }
            // Spectral (Barzilai-Borwein) step seed in the preconditioner
            // metric, safeguarded by the backtracking below.
            let bb = prev_point.as_ref().and_then(|(pu, pg)| {
                let s_vec = &us_flat - pu;
                let y_vec = &g_flat - pg;
                let sy = s_vec.dot(&y_vec);
                if sy > 0.0 {
                    let mut s_pinv_s = 0.0;
                    for (i, p) in precond.iter().enumerate() {
                        for j in 0..18 {
                            let v = s_vec[i * 18 + j];
                            s_pinv_s += v * v / p[j];
                        }
                    }
                    Some((s_pinv_s / sy).clamp(1e-8, 1e4))
                } else {
                    None
                }
            });
            prev_point = Some((us_flat, g_flat));
            let mut eta_try = bb.unwrap_or((eta * 2.0).min(1e6));
            let mut accepted = None;
            loop {
                let mut cand: Vec<ControlInput> = us
                    .iter()
                    .zip(grads.iter())
                    .zip(precond.iter())
                    .map(|((u, g), p)| {
                        ControlInput::from_vector(&(u.to_vector() - g.component_mul(p) * eta_try))
                    })
                    .collect();
                project_sequence(&mut cand, plan, cfg);
                let mut weighted_step_sq = 0.0;
                for ((c, u), p) in cand.iter().zip(us.iter()).zip(precond.iter()) {
                    let d = c.to_vector() - u.to_vector();
                    for j in 0..18 {
                        weighted_step_sq += d[j] * d[j] / p[j];
                    }
                }
                // Projected step in the curvature metric: scale-free and
                // a direct bound on the remaining per-step progress.
                if weighted_step_sq.sqrt() < solver.convergence_tol {
                    converged = true;
                    break;
                }
                // Armijo sufficient decrease in the preconditioner metric;
                // plain decrease would bounce across the valley forever.
                let required = j_cur - 0.5 / eta_try * weighted_step_sq;
                match penalized_objective(theta, s, plan, &cand, rho, cfg) {
                    Ok((j_cand, cand_states)) if j_cand <= required => {
                        accepted = Some((cand, j_cand, cand_states));
                        break;
                    }
                    _ => {
                        eta_try *= 0.5;
                        if eta_try < 1e-12 {
                            break;
                        }
                    }
                }
            }
            total_inner += 1;
            if std::env::var_os("CM_MPC_SOLVE_TRACE").is_some() {
                let g2: f64 = grads.iter().map(|g| g.norm_squared()).sum();
                let step = accepted
                    .as_ref()
                    .map(|(cand, _, _)| {
                        (flatten_sequence(cand) - flatten_sequence(&us)).norm()
                    })
                    .unwrap_or(0.0);
                eprintln!(
                    "trace rho={rho:.1e} it={total_inner} j={j_cur:.9e} |g|={:.3e} eta={eta_try:.3e} step={step:.3e} conv={converged}",
                    g2.sqrt(),
                );
            }
            if converged {
                break;
            }
            match accepted {
                Some((cand, j_cand, cand_states)) => {
                    us = cand;
                    j_cur = j_cand;
                    states = cand_states;
                    eta = eta_try;
                }
                // No decrease possible down to the step floor.
                None => break,
            }
        }

        let residual = max_state_residual(plan, &us, &states, cfg)?;
        per_stage_residuals.push(residual);
        final_states = Some(states);
        let _ = j_cur;

        // Converged with no state violation: higher penalty weights change
        // nothing, the active penalty terms are identically zero.
        if converged && residual <= 1e-15 {
            while per_stage_residuals.len() < outer {
                per_stage_residuals.push(residual);
            }
            break;
        }
    }

    let states = final_states.expect("penalty schedule is non-empty");
    let (cost, _) = penalized_objective(theta, s, plan, &us, *solver.penalty_schedule.last().unwrap(), cfg)?;
    let max_residual = max_state_residual(plan, &us, &states, cfg)?;
    let report = SolveReport {
        cost,
        max_state_residual: max_residual,
        inner_iterations: total_inner,
        outer_stages: per_stage_residuals.len(),
        converged,
        per_stage_residuals,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if max_residual > 1e-2 {
        return Err(Error::SolveFailed {
            max_residual,
            iterations: total_inner,
        });
    }
    Ok((us, report))
}

/// Receding-horizon controller with a warm-start store.
#[derive(Clone, Debug)]
pub struct RecedingHorizonController {
    pub theta: ParamVector,
    pub schedule: GaitSchedule,
    pub constraints: ConstraintConfig,
    pub solver: SolverConfig,
    pub command: CommandVelocity,
    pub nominal: NominalPose,
    warm: Option<Vec<ControlInput>>,
    pub last_report: Option<SolveReport>,
    pub solve_failures: u64,
    pub total_inner_iterations: u64,
    pub solves: u64,
}

impl RecedingHorizonController {
    pub fn new(
        theta: ParamVector,
        schedule: GaitSchedule,
        constraints: ConstraintConfig,
        solver: SolverConfig,
        command: CommandVelocity,
        nominal: NominalPose,
    ) -> Self {
        Self {
            theta,
            schedule,
            constraints,
            solver,
            command,
            nominal,
            warm: None,
            last_report: None,
            solve_failures: 0,
            total_inner_iterations: 0,
            solves: 0,
        }
    }

    fn shifted_warm(&self) -> Option<Vec<ControlInput>> {
        self.warm.as_ref().map(|w| {
            let mut shifted: Vec<ControlInput> = w[1..].to_vec();
            shifted.push(*w.last().unwrap());
            shifted
        })
    }

    /// Solve at (s, t) and return the first input of the plan. On a
    /// failed solve, fall back to the shifted previous solution.
    pub fn policy_step(&mut self, s: &ReducedState, t: f64) -> Result<ControlInput> {
        let plan = generate_references(
            &self.command,
            &self.schedule,
            &self.nominal,
            &self.theta.dynamics,
            t,
            self.solver.horizon,
            self.solver.dt,
        );
        let shifted = self.shifted_warm();
        let warm_arg = if self.solver.warm_start { shifted.as_deref() } else { None };
        self.solves += 1;
        match solve(&self.theta, s, &plan, &self.solver, &self.constraints, warm_arg) {
            Ok((us, report)) => {
                self.total_inner_iterations += report.inner_iterations as u64;
                self.last_report = Some(report);
                let first = us[0];
                self.warm = Some(us);
                Ok(first)
            }
            Err(Error::SolveFailed { .. }) => {
                self.solve_failures += 1;
                match shifted {
                    Some(sh) => {
                        let first = constraints::project_input(&sh[0], &plan.stages[0].phase, &self.constraints);
                        self.warm = Some(sh);
                        Ok(first)
                    }
                    None => {
                        let u = constraints::project_input(
                            &plan.stages[0].reference.input,
                            &plan.stages[0].phase,
                            &self.constraints,
                        );
                        Ok(u)
                    }
                }
            }
            Err(other) => Err(other),
        }
    }
}
