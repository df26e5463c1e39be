//! Constraint residuals, violation penalties, and the hard input projection.
//!
//! The feasible set splits by role:
//!
//! - input constraints (friction cone, CoP box, swing zero-wrench, stance
//!   zero-velocity, minimum normal force) are enforced *exactly* at
//!   deployment by [`project_input`];
//! - state-related constraints (workspace box, inter-foot distance, swing
//!   normal-velocity tracking) enter rollout valuation and the deployment
//!   solver through smooth quadratic penalties on [`residuals`].
//!
//! Inequality entries are stored after the `max(., 0)` clamp; the
//! subgradient at the clamp kink is taken as 0.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gait::PhasePair;
use crate::objective::ReferencePoint;
use crate::state::{input_index, state_index, ControlInput, ReducedState, Side};
use crate::Result;

/// Geometry and friction limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Coulomb friction coefficient.
    pub friction_mu: f64,
    /// Foot half-length (x), m. Bounds the CoP moment about y.
    pub foot_half_length: f64,
    /// Foot half-width (y), m. Bounds the CoP moment about x.
    pub foot_half_width: f64,
    /// Minimum center distance between the feet, m.
    pub min_foot_distance: f64,
    /// Per-foot workspace box relative to the base, m.
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
    /// Minimum stance normal force, N.
    pub min_normal_force: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            friction_mu: 0.7,
            foot_half_length: 0.10,
            foot_half_width: 0.05,
            min_foot_distance: 0.12,
            workspace_min: Vector3::new(-0.35, -0.45, -1.0),
            workspace_max: Vector3::new(0.35, 0.45, -0.35),
            min_normal_force: 0.0,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.friction_mu > 0.0
            && self.foot_half_length > 0.0
            && self.foot_half_width > 0.0
            && self.min_foot_distance > 0.0
            && self.min_normal_force >= 0.0)
        {
            return Err(Error::Config("constraint geometry must be positive".into()));
        }
        for j in 0..3 {
            if self.workspace_min[j] >= self.workspace_max[j] {
                return Err(Error::Config("workspace box must satisfy min < max".into()));
            }
        }
        Ok(())
    }
}

/// Quadratic penalty weights per residual kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub inequality: f64,
    pub equality: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            inequality: 1e3,
            equality: 1e4,
        }
    }
}

impl PenaltyWeights {
    pub fn uniform(w: f64) -> Self {
        Self { inequality: w, equality: w }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inequality > 0.0 && self.equality > 0.0) {
            return Err(Error::Config("penalty weights must be positive".into()));
        }
        Ok(())
    }
}

/// Stacked constraint residuals at one stage. Inequality entries are
/// post-clamp (always >= 0), equality entries are signed.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub inequality: Vec<f64>,
    pub equality: Vec<f64>,
}

impl ResidualVector {
    pub fn max_violation(&self) -> f64 {
        self.inequality
            .iter()
            .copied()
            .chain(self.equality.iter().map(|e| e.abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

/// Entry names matching the layout produced by [`residuals`] for `phase`.
pub fn residual_layout(phase: &PhasePair) -> (Vec<String>, Vec<String>) {
    let mut ineq = Vec::new();
    let mut eq = Vec::new();
    let foot_names = ["left", "right"];
    for side in Side::BOTH {
        if phase.is_stance(side) {
            let n = foot_names[side.index()];
            ineq.push(format!("friction_cone_{n}"));
            ineq.push(format!("cop_x_{n}"));
            ineq.push(format!("cop_y_{n}"));
        }
    }
    for side in Side::BOTH {
        let n = foot_names[side.index()];
        for axis in ["x", "y", "z"] {
            ineq.push(format!("workspace_min_{axis}_{n}"));
        }
        for axis in ["x", "y", "z"] {
            ineq.push(format!("workspace_max_{axis}_{n}"));
        }
    }
    ineq.push("foot_distance".into());
    for side in Side::BOTH {
        let n = foot_names[side.index()];
        if phase.is_swing(side) {
            for c in ["fx", "fy", "fz", "mx", "my", "mz"] {
                eq.push(format!("zero_wrench_{c}_{n}"));
            }
            eq.push(format!("swing_vz_{n}"));
        } else {
            for axis in ["x", "y", "z"] {
                eq.push(format!("stance_vel_{axis}_{n}"));
            }
        }
    }
    (ineq, eq)
}

fn clamp_pos(v: f64) -> f64 {
    v.max(0.0)
}

/// Stage residuals: friction cone, CoP, workspace box, inter-foot
/// distance (inequalities) and zero wrench, stance zero velocity, swing
/// normal-velocity tracking (equalities).
pub fn residuals(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    reference: &ReferencePoint,
    cfg: &ConstraintConfig,
) -> Result<ResidualVector> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite { context: "residual operand" });
    }
    let mut ineq = Vec::with_capacity(16);
    let mut eq = Vec::with_capacity(10);

    for side in Side::BOTH {
        if phase.is_stance(side) {
            let i = side.index();
            let f = u.force[i];
            let m = u.moment[i];
            let tangential = (f.x * f.x + f.y * f.y).sqrt();
            ineq.push(clamp_pos(tangential - cfg.friction_mu * f.z));
            ineq.push(clamp_pos(m.x.abs() - cfg.foot_half_width * f.z));
            ineq.push(clamp_pos(m.y.abs() - cfg.foot_half_length * f.z));
        }
    }
    for side in Side::BOTH {
        let i = side.index();
        let q = x.foot_pos[i] - x.base_pos;
        for j in 0..3 {
            ineq.push(clamp_pos(cfg.workspace_min[j] - q[j]));
        }
        for j in 0..3 {
            ineq.push(clamp_pos(q[j] - cfg.workspace_max[j]));
        }
    }
    ineq.push(clamp_pos(
        cfg.min_foot_distance - (x.foot_pos[0] - x.foot_pos[1]).norm(),
    ));

    for side in Side::BOTH {
        let i = side.index();
        if phase.is_swing(side) {
            for j in 0..3 {
                eq.push(u.force[i][j]);
            }
            for j in 0..3 {
                eq.push(u.moment[i][j]);
            }
            eq.push(u.foot_vel[i].z - reference.foot_vel[i].z);
        } else {
            for j in 0..3 {
                eq.push(u.foot_vel[i][j]);
            }
        }
    }

    Ok(ResidualVector { inequality: ineq, equality: eq })
}

/// Terminal residuals: the state-only entries of the stage set (workspace
/// box and inter-foot distance).
pub fn terminal_residuals(x: &ReducedState, cfg: &ConstraintConfig) -> Result<ResidualVector> {
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "terminal residual operand" });
    }
    let mut ineq = Vec::with_capacity(13);
    for side in Side::BOTH {
        let q = x.foot_pos[side.index()] - x.base_pos;
        for j in 0..3 {
            ineq.push(clamp_pos(cfg.workspace_min[j] - q[j]));
        }
        for j in 0..3 {
            ineq.push(clamp_pos(q[j] - cfg.workspace_max[j]));
        }
    }
    ineq.push(clamp_pos(
        cfg.min_foot_distance - (x.foot_pos[0] - x.foot_pos[1]).norm(),
    ));
    Ok(ResidualVector { inequality: ineq, equality: Vec::new() })
}

/// Weighted squared penalty of a residual vector.
pub fn penalty(r: &ResidualVector, w: &PenaltyWeights) -> Result<f64> {
    let mut phi = 0.0;
    for v in &r.inequality {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "penalty residual" });
        }
        phi += w.inequality * v * v;
    }
    for v in &r.equality {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "penalty residual" });
        }
        phi += w.equality * v * v;
    }
    Ok(phi)
}

/// Gradient of `penalty(residuals(x, u, ...))` with respect to the state
/// and input. Uses the 0 subgradient at every clamp kink.
pub fn penalty_gradient(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    reference: &ReferencePoint,
    cfg: &ConstraintConfig,
    w: &PenaltyWeights,
) -> Result<(SVector<f64, 18>, SVector<f64, 18>)> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite { context: "penalty operand" });
    }
    let mut dx = SVector::<f64, 18>::zeros();
    let mut du = SVector::<f64, 18>::zeros();

    for side in Side::BOTH {
        if phase.is_stance(side) {
            let i = side.index();
            let f = u.force[i];
            let m = u.moment[i];
            let tangential = (f.x * f.x + f.y * f.y).sqrt();

            // Friction cone.
            let g = tangential - cfg.friction_mu * f.z;
            if g > 0.0 {
                let coeff = 2.0 * w.inequality * g;
                if tangential > 0.0 {
                    du[input_index::FORCE[i]] += coeff * f.x / tangential;
                    du[input_index::FORCE[i] + 1] += coeff * f.y / tangential;
                }
                du[input_index::FORCE[i] + 2] += coeff * (-cfg.friction_mu);
            }
            // CoP.
            let gx = m.x.abs() - cfg.foot_half_width * f.z;
            if gx > 0.0 {
                let coeff = 2.0 * w.inequality * gx;
                du[input_index::MOMENT[i]] += coeff * m.x.signum();
                du[input_index::FORCE[i] + 2] += coeff * (-cfg.foot_half_width);
            }
            let gy = m.y.abs() - cfg.foot_half_length * f.z;
            if gy > 0.0 {
                let coeff = 2.0 * w.inequality * gy;
                du[input_index::MOMENT[i] + 1] += coeff * m.y.signum();
                du[input_index::FORCE[i] + 2] += coeff * (-cfg.foot_half_length);
            }
        }
    }

    for side in Side::BOTH {
        let i = side.index();
        let q = x.foot_pos[i] - x.base_pos;
        for j in 0..3 {
            let g_lo = cfg.workspace_min[j] - q[j];
            if g_lo > 0.0 {
                let coeff = 2.0 * w.inequality * g_lo;
                dx[state_index::FOOT[i] + j] -= coeff;
                dx[state_index::BASE_POS + j] += coeff;
            }
            let g_hi = q[j] - cfg.workspace_max[j];
            if g_hi > 0.0 {
                let coeff = 2.0 * w.inequality * g_hi;
                dx[state_index::FOOT[i] + j] += coeff;
                dx[state_index::BASE_POS + j] -= coeff;
            }
        }
    }

    let d = x.foot_pos[0] - x.foot_pos[1];
    let dist = d.norm();
    let g = cfg.min_foot_distance - dist;
    if g > 0.0 && dist > 0.0 {
        let coeff = 2.0 * w.inequality * g;
        for j in 0..3 {
            dx[state_index::FOOT[0] + j] += coeff * (-d[j] / dist);
            dx[state_index::FOOT[1] + j] += coeff * (d[j] / dist);
        }
    }

    for side in Side::BOTH {
        let i = side.index();
        if phase.is_swing(side) {
            for j in 0..3 {
                du[input_index::FORCE[i] + j] += 2.0 * w.equality * u.force[i][j];
                du[input_index::MOMENT[i] + j] += 2.0 * w.equality * u.moment[i][j];
            }
            let e = u.foot_vel[i].z - reference.foot_vel[i].z;
            du[input_index::FOOT_VEL[i] + 2] += 2.0 * w.equality * e;
        } else {
            for j in 0..3 {
                du[input_index::FOOT_VEL[i] + j] += 2.0 * w.equality * u.foot_vel[i][j];
            }
        }
    }

    Ok((dx, du))
}

/// Gradient of the terminal penalty with respect to the terminal state.
pub fn terminal_penalty_gradient(
    x: &ReducedState,
    cfg: &ConstraintConfig,
    w: &PenaltyWeights,
) -> Result<SVector<f64, 18>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "terminal penalty operand" });
    }
    let mut dx = SVector::<f64, 18>::zeros();
    for side in Side::BOTH {
        let i = side.index();
        let q = x.foot_pos[i] - x.base_pos;
        for j in 0..3 {
            let g_lo = cfg.workspace_min[j] - q[j];
            if g_lo > 0.0 {
                let coeff = 2.0 * w.inequality * g_lo;
                dx[state_index::FOOT[i] + j] -= coeff;
                dx[state_index::BASE_POS + j] += coeff;
            }
            let g_hi = q[j] - cfg.workspace_max[j];
            if g_hi > 0.0 {
                let coeff = 2.0 * w.inequality * g_hi;
                dx[state_index::FOOT[i] + j] += coeff;
                dx[state_index::BASE_POS + j] -= coeff;
            }
        }
    }
    let d = x.foot_pos[0] - x.foot_pos[1];
    let dist = d.norm();
    let g = cfg.min_foot_distance - dist;
    if g > 0.0 && dist > 0.0 {
        let coeff = 2.0 * w.inequality * g;
        for j in 0..3 {
            dx[state_index::FOOT[0] + j] += coeff * (-d[j] / dist);
            dx[state_index::FOOT[1] + j] += coeff * (d[j] / dist);
        }
    }
    Ok(dx)
}

/// Fractional shrink applied when snapping onto the friction-cone
/// boundary. Keeps the projected point a hair inside the cone so the
/// re-evaluated residual is exactly zero and reprojection is a bitwise
/// no-op.
const CONE_SHRINK: f64 = 1.0 - 1e-13;

/// Hard input projection used at deployment.
///
/// Swing feet get their wrench zeroed exactly. Stance feet get the normal
/// force clamped to the configured floor, the tangential force radially
/// projected onto the friction disk at that normal force, the CoP moments
/// clamped to the foot box, and the commanded velocity zeroed.
pub fn project_input(u: &ControlInput, phase: &PhasePair, cfg: &ConstraintConfig) -> ControlInput {
    let mut out = *u;
    for side in Side::BOTH {
        let i = side.index();
        if phase.is_swing(side) {
            out.force[i] = Vector3::zeros();
            out.moment[i] = Vector3::zeros();
        } else {
            let f = &mut out.force[i];
            f.z = f.z.max(cfg.min_normal_force);
            let limit = cfg.friction_mu * f.z;
            let tangential = (f.x * f.x + f.y * f.y).sqrt();
            if tangential > limit {
                let scale = if tangential > 0.0 {
                    limit / tangential * CONE_SHRINK
                } else {
                    0.0
                };
                f.x *= scale;
                f.y *= scale;
            }
            let m = &mut out.moment[i];
            let mx_max = cfg.foot_half_width * f.z;
            let my_max = cfg.foot_half_length * f.z;
            m.x = m.x.clamp(-mx_max, mx_max);
            m.y = m.y.clamp(-my_max, my_max);
            out.foot_vel[i] = Vector3::zeros();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::ContactMode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn standing() -> (ReducedState, ReferencePoint) {
        let s = ReducedState::standing(
            Vector3::new(0.0, 0.0, 0.75),
            Vector3::new(0.0, 0.12, 0.0),
            Vector3::new(0.0, -0.12, 0.0),
        );
        let r = ReferencePoint::from_state_input(s, ControlInput::zero());
        (s, r)
    }

    #[test]
    fn strictly_feasible_point_has_zero_residuals() {
        let (s, r) = standing();
        let cfg = ConstraintConfig::default();
        let u = ControlInput::standing_equilibrium(30.0, -9.81);
        let res = residuals(&s, &u, &PhasePair::DOUBLE_STANCE, &r, &cfg).unwrap();
        assert!(res.inequality.iter().all(|v| *v == 0.0));
        assert!(res.equality.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn friction_residual_hand_value() {
        let (s, r) = standing();
        let cfg = ConstraintConfig::default();
        let mu = cfg.friction_mu;
        let mut u = ControlInput::standing_equilibrium(30.0, -9.81);
        u.force[0] = Vector3::new(mu * 100.0 * 1.01, 0.0, 100.0);
        let res = residuals(&s, &u, &PhasePair::DOUBLE_STANCE, &r, &cfg).unwrap();
        // Layout: left foot friction first.
        assert_relative_eq!(res.inequality[0], 0.01 * mu * 100.0, max_relative = 1e-12);
        // CoP entries stay zero.
        assert_eq!(res.inequality[1], 0.0);
        assert_eq!(res.inequality[2], 0.0);
    }

    #[test]
    fn swing_unit_force_shows_in_one_equality_entry() {
        let (s, r) = standing();
        let cfg = ConstraintConfig::default();
        let phase = PhasePair::new(ContactMode::Swing, ContactMode::Stance);
        let mut u = ControlInput::zero();
        u.force[0] = Vector3::new(1.0, 0.0, 0.0);
        let res = residuals(&s, &u, &phase, &r, &cfg).unwrap();
        let nonzero: Vec<&f64> = res.equality.iter().filter(|v| **v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(*nonzero[0], 1.0);
        let (_, eq_names) = residual_layout(&phase);
        let idx = res.equality.iter().position(|v| *v != 0.0).unwrap();
        assert_eq!(eq_names[idx], "zero_wrench_fx_left");
    }

    #[test]
    fn layout_matches_residual_lengths() {
        let (s, r) = standing();
        let cfg = ConstraintConfig::default();
        for phase in [
            PhasePair::DOUBLE_STANCE,
            PhasePair::new(ContactMode::Swing, ContactMode::Stance),
            PhasePair::new(ContactMode::Stance, ContactMode::Swing),
        ] {
            let res = residuals(&s, &ControlInput::zero(), &phase, &r, &cfg).unwrap();
            let (ineq, eq) = residual_layout(&phase);
            assert_eq!(ineq.len(), res.inequality.len());
            assert_eq!(eq.len(), res.equality.len());
        }
    }

    #[test]
    fn penalty_zero_scaling_and_oracle() {
        let w = PenaltyWeights::default();
        let zero = ResidualVector { inequality: vec![0.0; 4], equality: vec![0.0; 3] };
        assert_eq!(penalty(&zero, &w).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = ResidualVector {
            inequality: (0..6).map(|_| rng.random_range(0.0..2.0)).collect(),
            equality: (0..5).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let phi = penalty(&r, &w).unwrap();
        let naive: f64 = r.inequality.iter().map(|v| w.inequality * v * v).sum::<f64>()
            + r.equality.iter().map(|v| w.equality * v * v).sum::<f64>();
        assert_relative_eq!(phi, naive, max_relative = 1e-12);

        let scaled = ResidualVector {
            inequality: r.inequality.iter().map(|v| 2.0 * v).collect(),
            equality: r.equality.iter().map(|v| 2.0 * v).collect(),
        };
        assert_relative_eq!(penalty(&scaled, &w).unwrap(), 4.0 * phi, max_relative = 1e-12);
    }

    #[test]
    fn penalty_monotone_in_each_entry() {
        let w = PenaltyWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let r = ResidualVector {
                inequality: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                equality: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let base = penalty(&r, &w).unwrap();
            let mut bumped = r.clone();
            let k = rng.random_range(0..4);
            // Grow the magnitude of one entry.
            let v = bumped.equality[k];
            bumped.equality[k] = if v >= 0.0 { v + 0.1 } else { v - 0.1 };
            assert!(penalty(&bumped, &w).unwrap() >= base);
        }
    }

    #[test]
    fn projection_identity_on_feasible_input() {
        let cfg = ConstraintConfig::default();
        let u = ControlInput::standing_equilibrium(30.0, -9.81);
        let p = project_input(&u, &PhasePair::DOUBLE_STANCE, &cfg);
        assert_eq!(p, u);
    }

    #[test]
    fn projection_scales_tangential_onto_disk() {
        let cfg = ConstraintConfig::default();
        let fz = 120.0;
        let mut u = ControlInput::zero();
        u.force[0] = Vector3::new(3.0 * cfg.friction_mu * fz, 0.0, fz);
        u.force[1] = Vector3::new(0.0, 0.0, fz);
        let p = project_input(&u, &PhasePair::DOUBLE_STANCE, &cfg);
        assert_relative_eq!(p.force[0].x, cfg.friction_mu * fz, max_relative = 1e-9);
        assert_eq!(p.force[0].y, 0.0);
        assert_eq!(p.force[0].z, fz);
    }

    #[test]
    fn projection_zeroes_swing_wrench() {
        let cfg = ConstraintConfig::default();
        let phase = PhasePair::new(ContactMode::Swing, ContactMode::Stance);
        let mut u = ControlInput::zero();
        u.force[0] = Vector3::new(13.0, -7.0, 99.0);
        u.moment[0] = Vector3::new(1.0, 2.0, 3.0);
        u.foot_vel[0] = Vector3::new(0.1, 0.0, 0.4);
        let p = project_input(&u, &phase, &cfg);
        assert_eq!(p.force[0], Vector3::zeros());
        assert_eq!(p.moment[0], Vector3::zeros());
        // Swing foot velocity is not an input constraint.
        assert_eq!(p.foot_vel[0], u.foot_vel[0]);
    }

    #[test]
    fn projection_is_bitwise_idempotent() {
        let cfg = ConstraintConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phases = [
            PhasePair::DOUBLE_STANCE,
            PhasePair::new(ContactMode::Swing, ContactMode::Stance),
            PhasePair::new(ContactMode::Stance, ContactMode::Swing),
        ];
        for k in 0..500 {
            let mut u = ControlInput::zero();
            for i in 0..2 {
                u.force[i] = Vector3::from_fn(|_, _| rng.random_range(-200.0..200.0));
                u.moment[i] = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
                u.foot_vel[i] = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            let phase = phases[k % 3];
            let once = project_input(&u, &phase, &cfg);
            let twice = project_input(&once, &phase, &cfg);
            assert_eq!(once, twice, "projection not idempotent at case {k}");
        }
    }

    #[test]
    fn projected_inputs_have_exactly_zero_input_residuals() {
        let cfg = ConstraintConfig::default();
        let (s, r) = standing();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phases = [
            PhasePair::DOUBLE_STANCE,
            PhasePair::new(ContactMode::Swing, ContactMode::Stance),
        ];
        for k in 0..200 {
            let mut u = ControlInput::zero();
            for i in 0..2 {
                u.force[i] = Vector3::from_fn(|_, _| rng.random_range(-200.0..200.0));
                u.moment[i] = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
                u.foot_vel[i] = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            let phase = phases[k % 2];
            let mut reference = r;
            // Make the swing v_z target equal the command so the tracking
            // equality is not counted as an input violation here.
            reference.foot_vel = project_input(&u, &phase, &cfg).foot_vel;
            let p = project_input(&u, &phase, &cfg);
            let res = residuals(&s, &p, &phase, &reference, &cfg).unwrap();
            // Friction cone, CoP, zero wrench, stance velocity all exact.
            assert!(
                res.inequality[..res.inequality.len() - 13].iter().all(|v| *v == 0.0),
                "cone/cop residual nonzero"
            );
            assert!(res.equality.iter().all(|v| *v == 0.0), "equality residual nonzero");
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences_away_from_kinks() {
        let cfg = ConstraintConfig::default();
        let w = PenaltyWeights { inequality: 3.0, equality: 7.0 };
        let h = 1e-5;
        let mut worst = 0.0_f64;
        let phases = [
            PhasePair::DOUBLE_STANCE,
            PhasePair::new(ContactMode::Swing, ContactMode::Stance),
        ];
        let mut accepted = 0;
        let mut seed = 0u64;
        while accepted < 100 {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ReducedState::standing(
                Vector3::new(0.0, 0.0, 0.75),
                Vector3::new(0.0, 0.3, -0.1),
                Vector3::new(0.1, -0.3, 0.1),
            );
            s.base_pos += Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            s.foot_pos[0] += Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            s.foot_pos[1] += Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let mut u = ControlInput::zero();
            for i in 0..2 {
                u.force[i] = Vector3::new(
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                    rng.random_range(20.0..120.0),
                );
                u.moment[i] = Vector3::from_fn(|_, _| rng.random_range(-15.0..15.0));
                u.foot_vel[i] = Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6));
            }
            let phase = phases[(seed % 2) as usize];
            let reference = ReferencePoint::from_state_input(s, ControlInput::zero());

            // Keep all pre-clamp inequality values away from the kink.
            if !kink_margin_ok(&s, &u, &phase, &cfg, 1e-3) {
                continue;
            }
            accepted += 1;

            let (dx, du) = penalty_gradient(&s, &u, &phase, &reference, &cfg, &w).unwrap();
            let phi = |s: &ReducedState, u: &ControlInput| {
                penalty(&residuals(s, u, &phase, &reference, &cfg).unwrap(), &w).unwrap()
            };
            // Comparison floor tied to the penalty magnitude: central
            // differences cancel at that scale.
            let scale = 1e-4 * (1.0 + phi(&s, &u));
            let sv = s.to_vector();
            let uv = u.to_vector();
            for j in 0..18 {
                let mut hi = sv;
                let mut lo = sv;
                hi[j] += h;
                lo[j] -= h;
                let fd = (phi(&ReducedState::from_vector(&hi), &u)
                    - phi(&ReducedState::from_vector(&lo), &u))
                    / (2.0 * h);
                worst = worst.max((fd - dx[j]).abs() / fd.abs().max(dx[j].abs()).max(scale));
            }
            for j in 0..18 {
                let mut hi = uv;
                let mut lo = uv;
                hi[j] += h;
                lo[j] -= h;
                let fd = (phi(&s, &ControlInput::from_vector(&hi))
                    - phi(&s, &ControlInput::from_vector(&lo)))
                    / (2.0 * h);
                worst = worst.max((fd - du[j]).abs() / fd.abs().max(du[j].abs()).max(scale));
            }
        }
        assert!(worst < 1e-5, "worst relative FD mismatch {worst:.3e}");
    }

    /// True when every pre-clamp inequality value sits at least `margin`
    /// away from zero (and the tangential norm away from its own kink).
    fn kink_margin_ok(
        x: &ReducedState,
        u: &ControlInput,
        phase: &PhasePair,
        cfg: &ConstraintConfig,
        margin: f64,
    ) -> bool {
        let mut pre = Vec::new();
        for side in Side::BOTH {
            if phase.is_stance(side) {
                let i = side.index();
                let f = u.force[i];
                let m = u.moment[i];
                let t = (f.x * f.x + f.y * f.y).sqrt();
                if t < margin {
                    return false;
                }
                pre.push(t - cfg.friction_mu * f.z);
                pre.push(m.x.abs() - cfg.foot_half_width * f.z);
                pre.push(m.y.abs() - cfg.foot_half_length * f.z);
                if m.x.abs() < margin || m.y.abs() < margin {
                    return false;
                }
            }
        }
        for side in Side::BOTH {
            let q = x.foot_pos[side.index()] - x.base_pos;
            for j in 0..3 {
                pre.push(cfg.workspace_min[j] - q[j]);
                pre.push(q[j] - cfg.workspace_max[j]);
            }
        }
        let dist = (x.foot_pos[0] - x.foot_pos[1]).norm();
        if dist < margin {
            return false;
        }
        pre.push(cfg.min_foot_distance - dist);
        pre.iter().all(|g| g.abs() >= margin)
    }
}
