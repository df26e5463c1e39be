//! Rollout-based surrogate action-value, its parameter gradient, and
//! measured returns.
//!
//! `q_mpc` replays a recorded action segment through the parameterized
//! model from the recorded anchor state and accumulates parameterized
//! stage costs plus constraint-violation penalties and a terminal term.
//! It never solves an optimization problem; its cost is exactly one model
//! step per stage. `q_mpc_gradient` differentiates the same quantity in
//! one reverse sweep over the stored rollout.
//!
//! `q_meas_all` turns a logged trajectory into discounted returns-to-go,
//! the learning targets the surrogate is matched against. The surrogate
//! itself is undiscounted over its short horizon; the discount and the
//! terminal term carry the horizon mismatch.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintConfig, PenaltyWeights};
use crate::gait::PhasePair;
use crate::model::{self, DynParams};
use crate::objective::{self, CostParams, ReferencePoint};
use crate::state::{ControlInput, ReducedState};
use crate::Result;

/// Total learnable dimension: 6 dynamics gains + 77 cost weights.
pub const PARAM_DIM: usize = 83;

/// Flattened parameter layout. Every consumer of a flat parameter or
/// gradient vector indexes through these ranges.
pub mod param_layout {
    use std::ops::Range;

    pub const GAIN_LIN: Range<usize> = 0..3;
    pub const GAIN_ANG: Range<usize> = 3..6;
    pub const STATE_WEIGHTS: Range<usize> = 6..24;
    pub const INPUT_WEIGHTS: Range<usize> = 24..42;
    pub const TERMINAL_WEIGHTS: Range<usize> = 42..60;
    pub const BASE_WEIGHTS: Range<usize> = 60..66;
    pub const COM_WEIGHTS: Range<usize> = 66..68;
    pub const SWING_WEIGHTS: Range<usize> = 68..80;
    pub const TORQUE_WEIGHTS: Range<usize> = 80..83;

    /// Block name for each flat index, for snapshots and diagnostics.
    pub fn block_of(index: usize) -> &'static str {
        match index {
            i if GAIN_LIN.contains(&i) => "gain_lin",
            i if GAIN_ANG.contains(&i) => "gain_ang",
            i if STATE_WEIGHTS.contains(&i) => "state_weights",
            i if INPUT_WEIGHTS.contains(&i) => "input_weights",
            i if TERMINAL_WEIGHTS.contains(&i) => "terminal_weights",
            i if BASE_WEIGHTS.contains(&i) => "base_weights",
            i if COM_WEIGHTS.contains(&i) => "com_weights",
            i if SWING_WEIGHTS.contains(&i) => "swing_weights",
            _ => "torque_weights",
        }
    }
}

/// Jointly parameterizes the predictive model and the cost functions.
/// The penalty weights are fixed hyperparameters, not part of the
/// learnable flattening (learning them jointly is scale-degenerate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub dynamics: DynParams,
    pub cost: CostParams,
    pub stage_penalty: PenaltyWeights,
    pub terminal_penalty: PenaltyWeights,
}

impl ParamVector {
    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.cost.validate()?;
        self.stage_penalty.validate()?;
        self.terminal_penalty.validate()
    }

    /// Flatten the learnable blocks in the documented layout order.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = DVector::zeros(PARAM_DIM);
        for j in 0..3 {
            v[param_layout::GAIN_LIN.start + j] = self.dynamics.gain_lin[j];
            v[param_layout::GAIN_ANG.start + j] = self.dynamics.gain_ang[j];
        }
        for j in 0..18 {
            v[param_layout::STATE_WEIGHTS.start + j] = self.cost.state_weights[j];
            v[param_layout::INPUT_WEIGHTS.start + j] = self.cost.input_weights[j];
            v[param_layout::TERMINAL_WEIGHTS.start + j] = self.cost.terminal_weights[j];
        }
        for j in 0..6 {
            v[param_layout::BASE_WEIGHTS.start + j] = self.cost.base_weights[j];
        }
        for j in 0..2 {
            v[param_layout::COM_WEIGHTS.start + j] = self.cost.com_weights[j];
        }
        for j in 0..12 {
            v[param_layout::SWING_WEIGHTS.start + j] = self.cost.swing_weights[j];
        }
        for j in 0..3 {
            v[param_layout::TORQUE_WEIGHTS.start + j] = self.cost.torque_weights[j];
        }
        v
    }

    /// Overwrite the learnable blocks from a flat vector.
    pub fn assign_flat(&mut self, v: &DVector<f64>) {
        assert_eq!(v.len(), PARAM_DIM);
        for j in 0..3 {
            self.dynamics.gain_lin[j] = v[param_layout::GAIN_LIN.start + j];
            self.dynamics.gain_ang[j] = v[param_layout::GAIN_ANG.start + j];
        }
        for j in 0..18 {
            self.cost.state_weights[j] = v[param_layout::STATE_WEIGHTS.start + j];
            self.cost.input_weights[j] = v[param_layout::INPUT_WEIGHTS.start + j];
            self.cost.terminal_weights[j] = v[param_layout::TERMINAL_WEIGHTS.start + j];
        }
        for j in 0..6 {
            self.cost.base_weights[j] = v[param_layout::BASE_WEIGHTS.start + j];
        }
        for j in 0..2 {
            self.cost.com_weights[j] = v[param_layout::COM_WEIGHTS.start + j];
        }
        for j in 0..12 {
            self.cost.swing_weights[j] = v[param_layout::SWING_WEIGHTS.start + j];
        }
        for j in 0..3 {
            self.cost.torque_weights[j] = v[param_layout::TORQUE_WEIGHTS.start + j];
        }
    }

    /// Elementwise projection bounds keeping gains strictly positive and
    /// weights nonnegative.
    pub fn lower_bounds(gain_floor: f64, weight_floor: f64) -> DVector<f64> {
        let mut b = DVector::from_element(PARAM_DIM, weight_floor);
        for j in param_layout::GAIN_LIN.chain(param_layout::GAIN_ANG) {
            b[j] = gain_floor;
        }
        b
    }
}

/// One logged closed-loop step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub state: ReducedState,
    pub action: ControlInput,
    /// Task stage cost of (state, action) under the frozen nominal weights.
    pub stage_cost: f64,
    pub phase: PhasePair,
    pub reference: ReferencePoint,
}

/// Recorded closed-loop data with uniform step spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub records: Vec<TrajectoryRecord>,
    /// True when a fall ended the episode before its scheduled length.
    pub truncated_by_fall: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest valid anchor for the horizon, if any. Anchors run over
    /// `{0, ..., len - horizon - 1}` so that a full action segment plus a
    /// terminal reference exist.
    pub fn max_anchor(&self, horizon: usize) -> Option<usize> {
        self.len().checked_sub(horizon + 1)
    }

    /// Borrowed view of the length-`horizon` segment anchored at `anchor`.
    pub fn segment(&self, anchor: usize, horizon: usize) -> Option<Segment<'_>> {
        if horizon == 0 || anchor + horizon >= self.len() {
            return None;
        }
        Some(Segment {
            records: &self.records[anchor..anchor + horizon],
            terminal_state_ref: &self.records[anchor + horizon].reference.state,
            dt: self.dt,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (k, r) in self.records.iter().enumerate() {
            let expected = k as f64 * self.dt;
            if (r.time - expected).abs() > 1e-9 {
                return Err(crate::error::Error::Config(format!(
                    "trajectory not uniformly spaced at record {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Action segment view: `records` carry the replayed actions, phases, and
/// per-stage references; the terminal reference closes the horizon.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub records: &'a [TrajectoryRecord],
    pub terminal_state_ref: &'a ReducedState,
    pub dt: f64,
}

impl Segment<'_> {
    pub fn horizon(&self) -> usize {
        self.records.len()
    }
}

/// Surrogate value with its per-stage breakdown and predicted rollout.
#[derive(Clone, Debug)]
pub struct QEvaluation {
    pub value: f64,
    pub stage_costs: Vec<f64>,
    pub stage_penalties: Vec<f64>,
    pub terminal_cost: f64,
    pub terminal_penalty: f64,
    /// Predicted states x_0 .. x_N.
    pub predicted_states: Vec<ReducedState>,
}

impl QEvaluation {
    pub fn breakdown_sum(&self) -> f64 {
        let stages: f64 = self
            .stage_costs
            .iter()
            .zip(self.stage_penalties.iter())
            .map(|(c, p)| c + p)
            .sum();
        stages + self.terminal_cost + self.terminal_penalty
    }
}

/// Roll the recorded action segment through the parameterized model from
/// anchor state `s` and accumulate stage costs, violation penalties, and
/// the terminal term. Undiscounted over the horizon.
pub fn q_mpc(
    theta: &ParamVector,
    s: &ReducedState,
    segment: &Segment<'_>,
    cfg: &ConstraintConfig,
) -> Result<QEvaluation> {
    let n = segment.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut stage_costs = Vec::with_capacity(n);
    let mut stage_penalties = Vec::with_capacity(n);

    let mut x = *s;
    states.push(x);
    let mut value = 0.0;
    for (i, rec) in segment.records.iter().enumerate() {
        let cost = objective::stage_cost(&x, &rec.action, &rec.reference, &rec.phase, &theta.cost, &theta.dynamics)
            .map_err(|e| e.at_stage(i))?;
        let res = constraints::residuals(&x, &rec.action, &rec.phase, &rec.reference, cfg)
            .map_err(|e| e.at_stage(i))?;
        let pen = constraints::penalty(&res, &theta.stage_penalty).map_err(|e| e.at_stage(i))?;
        stage_costs.push(cost);
        stage_penalties.push(pen);
        value += cost + pen;
        x = model::step(&x, &rec.action, &rec.phase, &theta.dynamics, segment.dt)
            .map_err(|e| e.at_stage(i))?;
        states.push(x);
    }
    let terminal_cost = objective::terminal_cost(&x, segment.terminal_state_ref, &theta.cost)?;
    let terminal_res = constraints::terminal_residuals(&x, cfg)?;
    let terminal_penalty = constraints::penalty(&terminal_res, &theta.terminal_penalty)?;
    value += terminal_cost + terminal_penalty;

    Ok(QEvaluation {
        value,
        stage_costs,
        stage_penalties,
        terminal_cost,
        terminal_penalty,
        predicted_states: states,
    })
}

/// Reverse-mode gradient of [`q_mpc`] over the flat parameter layout.
///
/// Forward pass stores the rollout and the exact step partials; the
/// backward pass runs the adjoint recursion
/// `lambda_i = d(L + phi)/dx_i + (dstep/dx_i)^T lambda_{i+1}` and collects
/// the direct cost-weight derivatives plus the gain terms
/// `(dstep/dgains)^T lambda_{i+1}`.
pub fn q_mpc_gradient(
    theta: &ParamVector,
    s: &ReducedState,
    segment: &Segment<'_>,
    cfg: &ConstraintConfig,
) -> Result<(DVector<f64>, QEvaluation)> {
    let n = segment.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut partials = Vec::with_capacity(n);
    let mut stage_costs = Vec::with_capacity(n);
    let mut stage_penalties = Vec::with_capacity(n);

    let mut x = *s;
    states.push(x);
    let mut value = 0.0;
    for (i, rec) in segment.records.iter().enumerate() {
        let cost = objective::stage_cost(&x, &rec.action, &rec.reference, &rec.phase, &theta.cost, &theta.dynamics)
            .map_err(|e| e.at_stage(i))?;
        let res = constraints::residuals(&x, &rec.action, &rec.phase, &rec.reference, cfg)
            .map_err(|e| e.at_stage(i))?;
        let pen = constraints::penalty(&res, &theta.stage_penalty).map_err(|e| e.at_stage(i))?;
        stage_costs.push(cost);
        stage_penalties.push(pen);
        value += cost + pen;

        let parts = model::step_partials(&x, &rec.action, &rec.phase, &theta.dynamics, segment.dt)
            .map_err(|e| e.at_stage(i))?;
        x = model::step(&x, &rec.action, &rec.phase, &theta.dynamics, segment.dt)
            .map_err(|e| e.at_stage(i))?;
        partials.push(parts);
        states.push(x);
    }

    let terminal_cost = objective::terminal_cost(&x, segment.terminal_state_ref, &theta.cost)?;
    let terminal_res = constraints::terminal_residuals(&x, cfg)?;
    let terminal_penalty = constraints::penalty(&terminal_res, &theta.terminal_penalty)?;
    value += terminal_cost + terminal_penalty;

    let mut grad = DVector::zeros(PARAM_DIM);

    let term_parts = objective::terminal_partials(&x, segment.terminal_state_ref, &theta.cost)?;
    for j in 0..18 {
        grad[param_layout::TERMINAL_WEIGHTS.start + j] += term_parts.wrt_terminal_weights[j];
    }
    let mut lambda = term_parts.wrt_state
        + constraints::terminal_penalty_gradient(&x, cfg, &theta.terminal_penalty)?;

    for i in (0..n).rev() {
        let rec = &segment.records[i];
        let xi = &states[i];
        let cp = objective::cost_partials(xi, &rec.action, &rec.reference, &rec.phase, &theta.cost, &theta.dynamics)?;
        let (pen_dx, _) =
            constraints::penalty_gradient(xi, &rec.action, &rec.phase, &rec.reference, cfg, &theta.stage_penalty)?;

        for j in 0..18 {
            grad[param_layout::STATE_WEIGHTS.start + j] += cp.wrt_state_weights[j];
            grad[param_layout::INPUT_WEIGHTS.start + j] += cp.wrt_input_weights[j];
        }
        for j in 0..6 {
            grad[param_layout::BASE_WEIGHTS.start + j] += cp.wrt_base_weights[j];
        }
        for j in 0..2 {
            grad[param_layout::COM_WEIGHTS.start + j] += cp.wrt_com_weights[j];
        }
        for j in 0..12 {
            grad[param_layout::SWING_WEIGHTS.start + j] += cp.wrt_swing_weights[j];
        }
        for j in 0..3 {
            grad[param_layout::TORQUE_WEIGHTS.start + j] += cp.wrt_torque_weights[j];
        }

        let gain_term = partials[i].wrt_gains.transpose() * lambda;
        for j in 0..6 {
            grad[param_layout::GAIN_LIN.start + j] += gain_term[j];
        }

        lambda = cp.wrt_state + pen_dx + partials[i].wrt_state.transpose() * lambda;
    }

    let eval = QEvaluation {
        value,
        stage_costs,
        stage_penalties,
        terminal_cost,
        terminal_penalty,
        predicted_states: states,
    };
    Ok((grad, eval))
}

/// Discounted returns-to-go for every index of the trajectory, by the
/// backward recursion `Q(k) = l_k + gamma * Q(k+1)`, `Q(len) = 0`.
pub fn q_meas_all(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for k in (0..traj.len()).rev() {
        acc = traj.records[k].stage_cost + gamma * acc;
        out[k] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::ContactMode;
    use crate::instrument;
    use approx::assert_relative_eq;
    use nalgebra::{SVector, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nominal_theta() -> ParamVector {
        let mut cost = CostParams::zeros();
        cost.state_weights = SVector::repeat(0.5);
        cost.input_weights = SVector::repeat(1e-4);
        cost.terminal_weights = SVector::repeat(0.2);
        cost.base_weights = SVector::repeat(1.0);
        cost.com_weights = SVector::repeat(5.0);
        cost.swing_weights = SVector::repeat(2.0);
        cost.torque_weights = SVector::repeat(1e-3);
        ParamVector {
            dynamics: DynParams::default_biped(),
            cost,
            stage_penalty: PenaltyWeights::default(),
            terminal_penalty: PenaltyWeights::default(),
        }
    }

    fn standing_state() -> ReducedState {
        ReducedState::standing(
            Vector3::new(0.0, 0.0, 0.75),
            Vector3::new(0.0, 0.12, 0.0),
            Vector3::new(0.0, -0.12, 0.0),
        )
    }

    /// Execute a feasible standing trajectory with the exact model (unit
    /// gains) and log task stage costs, mimicking closed-loop data.
    fn exact_model_trajectory(theta: &ParamVector, steps: usize, dt: f64) -> Trajectory {
        let x0 = standing_state();
        let reference = ReferencePoint::from_state_input(
            x0,
            ControlInput::standing_equilibrium(theta.dynamics.mass, theta.dynamics.gravity.z),
        );
        let phase = PhasePair::DOUBLE_STANCE;
        let mut records = Vec::new();
        let mut x = x0;
        for k in 0..steps {
            let mut u = ControlInput::standing_equilibrium(theta.dynamics.mass, theta.dynamics.gravity.z);
            // Small feasible wobble: stays inside cone and CoP box.
            let w = (k as f64 * 0.7).sin();
            u.force[0].z += 4.0 * w;
            u.force[1].z -= 4.0 * w;
            u.force[0].x = 2.0 * (k as f64 * 1.3).cos();
            u.force[1].x = -u.force[0].x;
            let cost =
                objective::stage_cost(&x, &u, &reference, &phase, &theta.cost, &theta.dynamics).unwrap();
            records.push(TrajectoryRecord {
                time: k as f64 * dt,
                state: x,
                action: u,
                stage_cost: cost,
                phase,
                reference,
            });
            x = model::step(&x, &u, &phase, &theta.dynamics, dt).unwrap();
        }
        Trajectory { dt, records, truncated_by_fall: false }
    }

    #[test]
    fn param_vector_flatten_roundtrip() {
        let mut theta = nominal_theta();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DVector::from_fn(PARAM_DIM, |_, _| rng.random_range(0.0..2.0));
        theta.assign_flat(&v);
        assert_eq!(theta.flatten(), v);
        assert_eq!(theta.dynamics.gain_lin[1], v[1]);
        assert_eq!(theta.cost.torque_weights[2], v[PARAM_DIM - 1]);
    }

    #[test]
    fn q_mpc_zero_weights_feasible_segment_is_zero() {
        let mut theta = nominal_theta();
        theta.cost = CostParams::zeros();
        let traj = exact_model_trajectory(&theta, 3, 0.01);
        let seg = traj.segment(0, 1).unwrap();
        let cfg = ConstraintConfig::default();
        let eval = q_mpc(&theta, &traj.records[0].state, &seg, &cfg).unwrap();
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn q_mpc_matches_hand_rolled_loop() {
        let mut theta = nominal_theta();
        theta.cost = CostParams::zeros();
        theta.cost.state_weights = SVector::repeat(1.0);
        theta.cost.terminal_weights = SVector::repeat(0.3);
        let traj = exact_model_trajectory(&theta, 5, 0.01);
        let seg = traj.segment(0, 3).unwrap();
        let cfg = ConstraintConfig::default();
        let eval = q_mpc(&theta, &traj.records[0].state, &seg, &cfg).unwrap();

        // Independent re-implementation: explicit rollout and accumulation.
        let mut x = traj.records[0].state;
        let mut expected = 0.0;
        for i in 0..3 {
            let rec = &traj.records[i];
            let e = x.to_vector() - rec.reference.state.to_vector();
            expected += e.iter().map(|v| v * v).sum::<f64>();
            x = model::step(&x, &rec.action, &rec.phase, &theta.dynamics, 0.01).unwrap();
        }
        let et = x.to_vector() - traj.records[3].reference.state.to_vector();
        expected += 0.3 * et.iter().map(|v| v * v).sum::<f64>();
        assert_relative_eq!(eval.value, expected, max_relative = 1e-12);
    }

    #[test]
    fn penalty_weight_doubling_shows_in_breakdown() {
        let theta = nominal_theta();
        let mut traj = exact_model_trajectory(&theta, 5, 0.01);
        // Violate the friction cone at stage 1.
        traj.records[1].action.force[0].x = 200.0;
        let cfg = ConstraintConfig::default();
        let seg = traj.segment(0, 3).unwrap();
        let base = q_mpc(&theta, &traj.records[0].state, &seg, &cfg).unwrap();
        let mut theta2 = theta.clone();
        theta2.stage_penalty.inequality *= 2.0;
        theta2.stage_penalty.equality *= 2.0;
        let seg2 = traj.segment(0, 3).unwrap();
        let doubled = q_mpc(&theta2, &traj.records[0].state, &seg2, &cfg).unwrap();
        let penalty_delta: f64 = base.stage_penalties.iter().sum();
        assert!(penalty_delta > 0.0, "scenario must actually violate something");
        assert_relative_eq!(doubled.value - base.value, penalty_delta, max_relative = 1e-9);
    }

    #[test]
    fn breakdown_sums_to_value() {
        let theta = nominal_theta();
        let mut traj = exact_model_trajectory(&theta, 8, 0.01);
        traj.records[2].action.moment[0].x = 9.0;
        let cfg = ConstraintConfig::default();
        let seg = traj.segment(1, 5).unwrap();
        let eval = q_mpc(&theta, &traj.records[1].state, &seg, &cfg).unwrap();
        assert_relative_eq!(eval.value, eval.breakdown_sum(), max_relative = 1e-10);
    }

    #[test]
    fn q_mpc_cost_is_one_step_per_stage_and_no_solves() {
        let theta = nominal_theta();
        let traj = exact_model_trajectory(&theta, 25, 0.01);
        let cfg = ConstraintConfig::default();
        let seg = traj.segment(0, 20).unwrap();
        let steps_before = instrument::model_step_count_thread();
        let solves_before = instrument::mpc_solve_count_thread();
        let _ = q_mpc(&theta, &traj.records[0].state, &seg, &cfg).unwrap();
        assert_eq!(instrument::model_step_count_thread() - steps_before, 20);
        assert_eq!(instrument::mpc_solve_count_thread() - solves_before, 0);
    }

    #[test]
    fn q_meas_examples() {
        let theta = nominal_theta();
        let mut traj = exact_model_trajectory(&theta, 3, 0.01);
        for (k, l) in [1.0, 1.0, 1.0].iter().enumerate() {
            traj.records[k].stage_cost = *l;
        }
        assert_eq!(q_meas_all(&traj, 0.5), vec![1.75, 1.5, 1.0]);

        for r in &mut traj.records {
            r.stage_cost = 0.0;
        }
        assert_eq!(q_meas_all(&traj, 0.9), vec![0.0; 3]);
    }

    #[test]
    fn q_meas_matches_naive_double_loop() {
        let theta = nominal_theta();
        let mut traj = exact_model_trajectory(&theta, 3, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        traj.records = (0..600)
            .map(|k| {
                let mut r = traj.records[0].clone();
                r.time = k as f64 * traj.dt;
                r.stage_cost = rng.random_range(0.0..5.0);
                r
            })
            .collect();
        let gamma = 0.985;
        let fast = q_meas_all(&traj, gamma);
        for k in (0..600).step_by(37) {
            let mut naive = 0.0;
            for i in 0..(600 - k) {
                naive += gamma.powi(i as i32) * traj.records[k + i].stage_cost;
            }
            assert_relative_eq!(fast[k], naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_plant_consistency_oracle() {
        // Exact model, gamma = 1, zero terminal weights, task weights as
        // the surrogate weights, segment length = trajectory length:
        // the surrogate and the measured return sum identical terms.
        let mut theta = nominal_theta();
        theta.cost.terminal_weights = SVector::zeros();
        let n = 20;
        let traj = exact_model_trajectory(&theta, n, 0.01);
        let terminal_ref = standing_state();
        let seg = Segment {
            records: &traj.records[..],
            terminal_state_ref: &terminal_ref,
            dt: traj.dt,
        };
        let cfg = ConstraintConfig::default();
        let eval = q_mpc(&theta, &traj.records[0].state, &seg, &cfg).unwrap();
        let q_meas = q_meas_all(&traj, 1.0);
        assert!(q_meas[0] > 0.0);
        assert_relative_eq!(eval.value, q_meas[0], max_relative = 1e-9);
    }

    #[test]
    fn gradient_weight_entries_are_squared_residual_sums() {
        let theta = nominal_theta();
        let traj = exact_model_trajectory(&theta, 8, 0.01);
        let cfg = ConstraintConfig::default();
        let seg = traj.segment(0, 5).unwrap();
        let (grad, eval) = q_mpc_gradient(&theta, &traj.records[0].state, &seg, &cfg).unwrap();
        // Closed form: dQ/d(state weight j) = sum_i (x_ij - ref_ij)^2.
        for j in 0..18 {
            let mut expected = 0.0;
            for i in 0..5 {
                let e = eval.predicted_states[i].to_vector()[j]
                    - traj.records[i].reference.state.to_vector()[j];
                expected += e * e;
            }
            assert_relative_eq!(
                grad[param_layout::STATE_WEIGHTS.start + j],
                expected,
                max_relative = 1e-10,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn gain_gradient_zero_without_contact_forces() {
        let mut theta = nominal_theta();
        theta.cost.torque_weights = SVector::zeros();
        let x0 = standing_state();
        let phase = PhasePair::new(ContactMode::Stance, ContactMode::Stance);
        let reference = ReferencePoint::from_state_input(x0, ControlInput::zero());
        let dt = 0.01;
        let records: Vec<TrajectoryRecord> = (0..6)
            .map(|k| TrajectoryRecord {
                time: k as f64 * dt,
                state: x0,
                action: ControlInput::zero(),
                stage_cost: 0.0,
                phase,
                reference,
            })
            .collect();
        let terminal = x0;
        let seg = Segment { records: &records[..5], terminal_state_ref: &terminal, dt };
        let cfg = ConstraintConfig::default();
        let (grad, _) = q_mpc_gradient(&theta, &x0, &seg, &cfg).unwrap();
        // Zero wrench everywhere: gains multiply zero sums at every stage.
        for j in param_layout::GAIN_LIN.chain(param_layout::GAIN_ANG) {
            assert_relative_eq!(grad[j], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_small() {
        let theta = nominal_theta();
        let mut traj = exact_model_trajectory(&theta, 8, 0.01);
        // Perturb recorded actions so the rollout deviates from references.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in &mut traj.records {
            r.action.force[0].x += rng.random_range(-5.0..5.0);
            r.action.force[1].z += rng.random_range(-8.0..8.0);
            r.action.moment[1].y += rng.random_range(-0.5..0.5);
        }
        let cfg = ConstraintConfig::default();
        let seg = traj.segment(0, 5).unwrap();
        let s0 = traj.records[0].state;
        let (grad, _) = q_mpc_gradient(&theta, &s0, &seg, &cfg).unwrap();

        let flat = theta.flatten();
        let gmax = grad.amax();
        let mut worst = 0.0_f64;
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
            let qhi = q_mpc(&hi, &s0, &traj.segment(0, 5).unwrap(), &cfg).unwrap().value;
            let qlo = q_mpc(&lo, &s0, &traj.segment(0, 5).unwrap(), &cfg).unwrap().value;
            let fd = (qhi - qlo) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-3 * gmax));
        }
        assert!(worst < 1e-5, "worst relative FD mismatch {worst:.3e}");
    }
}
