//! Parameterized quadratic stage and terminal costs.
//!
//! The stage cost decomposes into five terms: state/input tracking,
//! base-motion regularization, CoM centering over the support midpoint,
//! swing-foot tracking, and a contact-torque regularizer. Every weight
//! matrix is diagonal with learnable nonnegative entries; each term is
//! linear in its own weight block, which makes the weight gradients exact
//! squared residuals.
//!
//! The same functional family serves two roles: with learnable weights it
//! is the predictive objective inside the surrogate value, and with frozen
//! nominal weights it is the task cost that defines measured returns. The
//! two must never share a parameter struct instance.

use nalgebra::{SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gait::PhasePair;
use crate::model::DynParams;
use crate::state::{state_index, ControlInput, ReducedState, Side};
use crate::Result;

/// Diagonal weights of all cost terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// State-tracking weights (diag Q), indexed like the state vector.
    pub state_weights: SVector<f64, 18>,
    /// Input-tracking weights (diag R), indexed like the input vector.
    pub input_weights: SVector<f64, 18>,
    /// Terminal state weights (diag Q_f).
    pub terminal_weights: SVector<f64, 18>,
    /// Base regularization: [euler error (3), angular velocity error (3)].
    pub base_weights: SVector<f64, 6>,
    /// Horizontal CoM-centering weights (x, y).
    pub com_weights: SVector<f64, 2>,
    /// Swing-foot tracking: [left pos (3), left vel (3), right pos (3), right vel (3)].
    pub swing_weights: SVector<f64, 12>,
    /// Contact-torque regularization (shared across stance feet).
    pub torque_weights: SVector<f64, 3>,
}

impl CostParams {
    pub fn zeros() -> Self {
        Self {
            state_weights: SVector::zeros(),
            input_weights: SVector::zeros(),
            terminal_weights: SVector::zeros(),
            base_weights: SVector::zeros(),
            com_weights: SVector::zeros(),
            swing_weights: SVector::zeros(),
            torque_weights: SVector::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.iter_all();
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "cost weights" });
            }
            if v < 0.0 {
                return Err(Error::Config("cost weights must be nonnegative".into()));
            }
        }
        Ok(())
    }

    fn iter_all(&self) -> impl Iterator<Item = f64> + '_ {
        self.state_weights
            .iter()
            .chain(self.input_weights.iter())
            .chain(self.terminal_weights.iter())
            .chain(self.base_weights.iter())
            .chain(self.com_weights.iter())
            .chain(self.swing_weights.iter())
            .chain(self.torque_weights.iter())
            .copied()
    }
}

/// Per-stage tracking references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub state: ReducedState,
    pub input: ControlInput,
    /// Foot position references [left, right] (used for swing feet).
    pub foot_pos: [Vector3<f64>; 2],
    /// Foot velocity references [left, right] (used for swing feet; the z
    /// component is also the swing normal-velocity constraint target).
    pub foot_vel: [Vector3<f64>; 2],
}

impl ReferencePoint {
    /// Reference fully consistent with a given state/input pair.
    pub fn from_state_input(state: ReducedState, input: ControlInput) -> Self {
        Self {
            state,
            input,
            foot_pos: state.foot_pos,
            foot_vel: input.foot_vel,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.state.is_finite()
            && self.input.is_finite()
            && self.foot_pos.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.foot_vel.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Gradients of [`stage_cost`] with respect to state, input, and every
/// weight block.
#[derive(Clone, Debug)]
pub struct StageCostPartials {
    pub wrt_state: SVector<f64, 18>,
    pub wrt_input: SVector<f64, 18>,
    pub wrt_state_weights: SVector<f64, 18>,
    pub wrt_input_weights: SVector<f64, 18>,
    pub wrt_base_weights: SVector<f64, 6>,
    pub wrt_com_weights: SVector<f64, 2>,
    pub wrt_swing_weights: SVector<f64, 12>,
    pub wrt_torque_weights: SVector<f64, 3>,
}

/// Gradients of [`terminal_cost`].
#[derive(Clone, Debug)]
pub struct TerminalCostPartials {
    pub wrt_state: SVector<f64, 18>,
    pub wrt_terminal_weights: SVector<f64, 18>,
}

fn check_finite(x: &ReducedState, u: &ControlInput, reference: &ReferencePoint) -> Result<()> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite { context: "stage cost operand" });
    }
    if !reference.is_finite() {
        return Err(Error::NonFinite { context: "stage cost reference" });
    }
    Ok(())
}

/// Five-term quadratic stage cost.
pub fn stage_cost(
    x: &ReducedState,
    u: &ControlInput,
    reference: &ReferencePoint,
    phase: &PhasePair,
    c: &CostParams,
    dyn_params: &DynParams,
) -> Result<f64> {
    check_finite(x, u, reference)?;

    let ex = x.to_vector() - reference.state.to_vector();
    let eu = u.to_vector() - reference.input.to_vector();
    let mut cost = 0.0;

    // Tracking.
    for j in 0..18 {
        cost += c.state_weights[j] * ex[j] * ex[j];
        cost += c.input_weights[j] * eu[j] * eu[j];
    }

    // Base regularization: orientation + angular velocity error.
    let e_euler = x.base_euler - reference.state.base_euler;
    let omega = x.ang_momentum.component_div(&dyn_params.inertia);
    let omega_ref = reference.state.ang_momentum.component_div(&dyn_params.inertia);
    let e_omega = omega - omega_ref;
    for j in 0..3 {
        cost += c.base_weights[j] * e_euler[j] * e_euler[j];
        cost += c.base_weights[3 + j] * e_omega[j] * e_omega[j];
    }

    // CoM centering over the support midpoint.
    let mid = 0.5 * (x.foot_pos[0].xy() + x.foot_pos[1].xy());
    let e_com: Vector2<f64> = x.base_pos.xy() - mid;
    cost += c.com_weights[0] * e_com[0] * e_com[0];
    cost += c.com_weights[1] * e_com[1] * e_com[1];

    // Swing-foot tracking.
    for side in Side::BOTH {
        if phase.is_swing(side) {
            let i = side.index();
            let e_pos = x.foot_pos[i] - reference.foot_pos[i];
            let e_vel = u.foot_vel[i] - reference.foot_vel[i];
            for j in 0..3 {
                cost += c.swing_weights[6 * i + j] * e_pos[j] * e_pos[j];
                cost += c.swing_weights[6 * i + 3 + j] * e_vel[j] * e_vel[j];
            }
        }
    }

    // Contact-torque regularization per stance foot.
    for side in Side::BOTH {
        if phase.is_stance(side) {
            let i = side.index();
            let r = x.foot_pos[i] - x.base_pos;
            let tau = r.cross(&u.force[i]) + u.moment[i];
            for j in 0..3 {
                cost += c.torque_weights[j] * tau[j] * tau[j];
            }
        }
    }

    Ok(cost)
}

/// Quadratic terminal cost |x - x_ref|^2 weighted by the terminal block.
pub fn terminal_cost(x: &ReducedState, x_ref: &ReducedState, c: &CostParams) -> Result<f64> {
    if !x.is_finite() || !x_ref.is_finite() {
        return Err(Error::NonFinite { context: "terminal cost operand" });
    }
    let e = x.to_vector() - x_ref.to_vector();
    let mut cost = 0.0;
    for j in 0..18 {
        cost += c.terminal_weights[j] * e[j] * e[j];
    }
    Ok(cost)
}

/// Exact gradients of the stage cost.
pub fn cost_partials(
    x: &ReducedState,
    u: &ControlInput,
    reference: &ReferencePoint,
    phase: &PhasePair,
    c: &CostParams,
    dyn_params: &DynParams,
) -> Result<StageCostPartials> {
    check_finite(x, u, reference)?;

    let ex = x.to_vector() - reference.state.to_vector();
    let eu = u.to_vector() - reference.input.to_vector();

    let mut dx = SVector::<f64, 18>::zeros();
    let mut du = SVector::<f64, 18>::zeros();
    let mut d_qw = SVector::<f64, 18>::zeros();
    let mut d_rw = SVector::<f64, 18>::zeros();
    let mut d_bw = SVector::<f64, 6>::zeros();
    let mut d_cw = SVector::<f64, 2>::zeros();
    let mut d_sw = SVector::<f64, 12>::zeros();
    let mut d_tw = SVector::<f64, 3>::zeros();

    for j in 0..18 {
        dx[j] += 2.0 * c.state_weights[j] * ex[j];
        du[j] += 2.0 * c.input_weights[j] * eu[j];
        d_qw[j] = ex[j] * ex[j];
        d_rw[j] = eu[j] * eu[j];
    }

    let e_euler = x.base_euler - reference.state.base_euler;
    let omega = x.ang_momentum.component_div(&dyn_params.inertia);
    let omega_ref = reference.state.ang_momentum.component_div(&dyn_params.inertia);
    let e_omega = omega - omega_ref;
    for j in 0..3 {
        dx[state_index::BASE_EULER + j] += 2.0 * c.base_weights[j] * e_euler[j];
        dx[state_index::H_ANG + j] +=
            2.0 * c.base_weights[3 + j] * e_omega[j] / dyn_params.inertia[j];
        d_bw[j] = e_euler[j] * e_euler[j];
        d_bw[3 + j] = e_omega[j] * e_omega[j];
    }

    let mid = 0.5 * (x.foot_pos[0].xy() + x.foot_pos[1].xy());
    let e_com: Vector2<f64> = x.base_pos.xy() - mid;
    for j in 0..2 {
        let g = 2.0 * c.com_weights[j] * e_com[j];
        dx[state_index::BASE_POS + j] += g;
        dx[state_index::FOOT[0] + j] += -0.5 * g;
        dx[state_index::FOOT[1] + j] += -0.5 * g;
        d_cw[j] = e_com[j] * e_com[j];
    }

    for side in Side::BOTH {
        let i = side.index();
        if phase.is_swing(side) {
            let e_pos = x.foot_pos[i] - reference.foot_pos[i];
            let e_vel = u.foot_vel[i] - reference.foot_vel[i];
            for j in 0..3 {
                dx[state_index::FOOT[i] + j] += 2.0 * c.swing_weights[6 * i + j] * e_pos[j];
                du[crate::state::input_index::FOOT_VEL[i] + j] +=
                    2.0 * c.swing_weights[6 * i + 3 + j] * e_vel[j];
                d_sw[6 * i + j] = e_pos[j] * e_pos[j];
                d_sw[6 * i + 3 + j] = e_vel[j] * e_vel[j];
            }
        } else {
            let r = x.foot_pos[i] - x.base_pos;
            let f = u.force[i];
            let tau = r.cross(&f) + u.moment[i];
            let dtau = Vector3::new(
                2.0 * c.torque_weights[0] * tau[0],
                2.0 * c.torque_weights[1] * tau[1],
                2.0 * c.torque_weights[2] * tau[2],
            );
            // tau = r x f:  d/dr = -[f]x, d/df = [r]x, and [v]x^T = -[v]x.
            let g_r = f.cross(&dtau);
            let g_f = -r.cross(&dtau);
            for j in 0..3 {
                dx[state_index::FOOT[i] + j] += g_r[j];
                dx[state_index::BASE_POS + j] -= g_r[j];
                du[crate::state::input_index::FORCE[i] + j] += g_f[j];
                du[crate::state::input_index::MOMENT[i] + j] += dtau[j];
                d_tw[j] += tau[j] * tau[j];
            }
        }
    }

    Ok(StageCostPartials {
        wrt_state: dx,
        wrt_input: du,
        wrt_state_weights: d_qw,
        wrt_input_weights: d_rw,
        wrt_base_weights: d_bw,
        wrt_com_weights: d_cw,
        wrt_swing_weights: d_sw,
        wrt_torque_weights: d_tw,
    })
}

/// Exact gradients of the terminal cost.
pub fn terminal_partials(
    x: &ReducedState,
    x_ref: &ReducedState,
    c: &CostParams,
) -> Result<TerminalCostPartials> {
    if !x.is_finite() || !x_ref.is_finite() {
        return Err(Error::NonFinite { context: "terminal cost operand" });
    }
    let e = x.to_vector() - x_ref.to_vector();
    let mut dx = SVector::<f64, 18>::zeros();
    let mut dw = SVector::<f64, 18>::zeros();
    for j in 0..18 {
        dx[j] = 2.0 * c.terminal_weights[j] * e[j];
        dw[j] = e[j] * e[j];
    }
    Ok(TerminalCostPartials {
        wrt_state: dx,
        wrt_terminal_weights: dw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::ContactMode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dynp() -> DynParams {
        DynParams::default_biped()
    }

    fn unit_weights() -> CostParams {
        CostParams {
            state_weights: SVector::repeat(1.0),
            input_weights: SVector::repeat(1.0),
            terminal_weights: SVector::repeat(1.0),
            base_weights: SVector::repeat(1.0),
            com_weights: SVector::repeat(1.0),
            swing_weights: SVector::repeat(1.0),
            torque_weights: SVector::repeat(1.0),
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (ReducedState, ControlInput, ReferencePoint, CostParams) {
        let mut s = ReducedState::standing(
            Vector3::new(0.0, 0.0, 0.75),
            Vector3::new(0.0, 0.09, 0.0),
            Vector3::new(0.0, -0.09, 0.0),
        );
        s.lin_momentum = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        s.ang_momentum = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        s.base_pos += Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
        s.base_euler = Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4));
        s.foot_pos[0] += Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        s.foot_pos[1] += Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));

        let mut u = ControlInput::zero();
        for i in 0..2 {
            u.force[i] = Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0));
            u.moment[i] = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            u.foot_vel[i] = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        }

        let mut ref_state = s;
        ref_state.base_pos += Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        ref_state.lin_momentum += Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let mut reference = ReferencePoint::from_state_input(ref_state, ControlInput::zero());
        reference.foot_pos[0] += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        reference.foot_vel[1] = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));

        let mut c = unit_weights();
        c.state_weights = SVector::from_fn(|_, _| rng.random_range(0.0..2.0));
        c.input_weights = SVector::from_fn(|_, _| rng.random_range(0.0..0.1));
        c.base_weights = SVector::from_fn(|_, _| rng.random_range(0.0..2.0));
        c.com_weights = SVector::from_fn(|_, _| rng.random_range(0.0..5.0));
        c.swing_weights = SVector::from_fn(|_, _| rng.random_range(0.0..3.0));
        c.torque_weights = SVector::from_fn(|_, _| rng.random_range(0.0..0.1));
        c.terminal_weights = SVector::from_fn(|_, _| rng.random_range(0.0..2.0));
        (s, u, reference, c)
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let s = ReducedState::standing(
            Vector3::new(0.0, 0.0, 0.75),
            Vector3::new(0.0, 0.09, 0.0),
            Vector3::new(0.0, -0.09, 0.0),
        );
        let u = ControlInput::zero();
        let reference = ReferencePoint::from_state_input(s, u);
        let c = unit_weights();
        let cost = stage_cost(&s, &u, &reference, &PhasePair::DOUBLE_STANCE, &c, &dynp()).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn zero_weights_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, u, reference, _) = random_instance(&mut rng);
        let c = CostParams::zeros();
        let phase = PhasePair::new(ContactMode::Stance, ContactMode::Swing);
        assert_eq!(stage_cost(&s, &u, &reference, &phase, &c, &dynp()).unwrap(), 0.0);
    }

    #[test]
    fn state_tracking_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (s, u, reference, _) = random_instance(&mut rng);
            let mut c = CostParams::zeros();
            c.state_weights = SVector::repeat(1.0);
            let cost =
                stage_cost(&s, &u, &reference, &PhasePair::DOUBLE_STANCE, &c, &dynp()).unwrap();
            let naive: f64 = (s.to_vector() - reference.state.to_vector())
                .iter()
                .map(|e| e * e)
                .sum();
            assert_relative_eq!(cost, naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn terminal_cost_oracle_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, _, reference, mut c) = random_instance(&mut rng);
        assert_eq!(terminal_cost(&s, &s, &c).unwrap(), 0.0);

        let base = terminal_cost(&s, &reference.state, &c).unwrap();
        let naive: f64 = (s.to_vector() - reference.state.to_vector())
            .iter()
            .zip(c.terminal_weights.iter())
            .map(|(e, w)| w * e * e)
            .sum();
        assert_relative_eq!(base, naive, max_relative = 1e-12);

        c.terminal_weights *= 2.0;
        let doubled = terminal_cost(&s, &reference.state, &c).unwrap();
        assert_relative_eq!(doubled, 2.0 * base, max_relative = 1e-12);
    }

    #[test]
    fn each_term_linear_in_its_weight_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phase = PhasePair::new(ContactMode::Swing, ContactMode::Stance);
        let (s, u, reference, c) = random_instance(&mut rng);
        let f = |c: &CostParams| stage_cost(&s, &u, &reference, &phase, c, &dynp()).unwrap();
        let base = f(&c);
        // Doubling every block doubles the total (joint linearity).
        let mut c2 = c.clone();
        c2.state_weights *= 2.0;
        c2.input_weights *= 2.0;
        c2.base_weights *= 2.0;
        c2.com_weights *= 2.0;
        c2.swing_weights *= 2.0;
        c2.torque_weights *= 2.0;
        assert_relative_eq!(f(&c2), 2.0 * base, max_relative = 1e-12);
    }

    #[test]
    fn partials_vanish_at_the_minimum() {
        let s = ReducedState::standing(
            Vector3::new(0.0, 0.0, 0.75),
            Vector3::new(0.0, 0.09, 0.0),
            Vector3::new(0.0, -0.09, 0.0),
        );
        let u = ControlInput::zero();
        let reference = ReferencePoint::from_state_input(s, u);
        let c = unit_weights();
        let p = cost_partials(&s, &u, &reference, &PhasePair::DOUBLE_STANCE, &c, &dynp()).unwrap();
        assert_eq!(p.wrt_state, SVector::<f64, 18>::zeros());
        assert_eq!(p.wrt_input, SVector::<f64, 18>::zeros());
        assert_eq!(p.wrt_state_weights, SVector::<f64, 18>::zeros());
        assert_eq!(p.wrt_torque_weights, SVector::<f64, 3>::zeros());
    }

    #[test]
    fn weight_gradients_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (s, u, reference, c) = random_instance(&mut rng);
            let phase = PhasePair::new(ContactMode::Stance, ContactMode::Swing);
            let p = cost_partials(&s, &u, &reference, &phase, &c, &dynp()).unwrap();
            assert!(p.wrt_state_weights.iter().all(|g| *g >= 0.0));
            assert!(p.wrt_input_weights.iter().all(|g| *g >= 0.0));
            assert!(p.wrt_base_weights.iter().all(|g| *g >= 0.0));
            assert!(p.wrt_com_weights.iter().all(|g| *g >= 0.0));
            assert!(p.wrt_swing_weights.iter().all(|g| *g >= 0.0));
            assert!(p.wrt_torque_weights.iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let h = 1e-5;
        let phases = [
            PhasePair::DOUBLE_STANCE,
            PhasePair::new(ContactMode::Swing, ContactMode::Stance),
            PhasePair::new(ContactMode::Stance, ContactMode::Swing),
        ];
        let mut worst = 0.0_f64;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, u, reference, c) = random_instance(&mut rng);
            let phase = phases[(seed % 3) as usize];
            let p = cost_partials(&s, &u, &reference, &phase, &c, &dynp()).unwrap();
            // Cancellation in the central difference scales with the cost
            // value; tie the comparison floor to it.
            let scale = 1e-4 * (1.0 + stage_cost(&s, &u, &reference, &phase, &c, &dynp()).unwrap());

            let sv = s.to_vector();
            let uv = u.to_vector();
            for j in 0..18 {
                let mut hi = sv;
                let mut lo = sv;
                hi[j] += h;
                lo[j] -= h;
                let chi = stage_cost(&ReducedState::from_vector(&hi), &u, &reference, &phase, &c, &dynp()).unwrap();
                let clo = stage_cost(&ReducedState::from_vector(&lo), &u, &reference, &phase, &c, &dynp()).unwrap();
                let fd = (chi - clo) / (2.0 * h);
                worst = worst.max((fd - p.wrt_state[j]).abs() / fd.abs().max(p.wrt_state[j].abs()).max(scale));
            }
            for j in 0..18 {
                let mut hi = uv;
                let mut lo = uv;
                hi[j] += h;
                lo[j] -= h;
                let chi = stage_cost(&s, &ControlInput::from_vector(&hi), &reference, &phase, &c, &dynp()).unwrap();
                let clo = stage_cost(&s, &ControlInput::from_vector(&lo), &reference, &phase, &c, &dynp()).unwrap();
                let fd = (chi - clo) / (2.0 * h);
                worst = worst.max((fd - p.wrt_input[j]).abs() / fd.abs().max(p.wrt_input[j].abs()).max(scale));
            }
        }
        assert!(worst < 1e-6, "worst relative FD mismatch {worst:.3e}");
    }

    #[test]
    fn weight_partials_match_per_block_differences() {
        // dL/dw_j must equal the squared residual the block weights.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (s, u, reference, c) = random_instance(&mut rng);
        let phase = PhasePair::new(ContactMode::Swing, ContactMode::Stance);
        let p = cost_partials(&s, &u, &reference, &phase, &c, &dynp()).unwrap();
        let base = stage_cost(&s, &u, &reference, &phase, &c, &dynp()).unwrap();
        let h = 1e-3;
        for j in 0..12 {
            let mut c2 = c.clone();
            c2.swing_weights[j] += h;
            let up = stage_cost(&s, &u, &reference, &phase, &c2, &dynp()).unwrap();
            // Linear in the weight, so a one-sided difference is exact.
            assert_relative_eq!((up - base) / h, p.wrt_swing_weights[j], max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}
