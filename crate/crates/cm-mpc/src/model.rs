//! Reduced centroidal dynamics with learnable momentum gains.
//!
//! The continuous dynamics on the 18-dimensional reduced state are
//!
//! ```text
//! h_lin' = gain_lin .* (f_L + f_R) + M g
//! h_ang' = gain_ang .* sum_i ((p_i - p_b) x f_i + m_i)
//! p_b'   = h_lin / M
//! e_b'   = Einv(e_b) (h_ang ./ I_diag)      (ZYX Euler rates)
//! p_i'   = v_i  (swing)   |   0  (stance)
//! ```
//!
//! The base frame coincides with the CoM and limb momentum is neglected,
//! so the momentum-to-velocity map is the constant block diagonal
//! `blockdiag(M I3, I_diag)`. The elementwise gains on the momentum
//! derivatives are the learnable part of the model and absorb systematic
//! wrench-realization mismatch.
//!
//! Discretization is fixed-step RK4 with the contact phase and input held
//! constant over the step; [`step_partials`] differentiates the discrete
//! RK4 map exactly (not the continuous flow), which is what the rollout
//! gradient needs.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gait::PhasePair;
use crate::instrument;
use crate::state::{input_index, state_index, ControlInput, InputVector, ReducedState, StateVector, EULER_PITCH_MARGIN};
use crate::Result;

/// Divergence bound on any state component after a step.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// Gain dimension of the learnable dynamics block (gain_lin + gain_ang).
pub const GAIN_DIM: usize = 6;

/// Dynamics parameters. `gain_lin`/`gain_ang` are learnable; the rest are
/// fixed physical constants from the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynParams {
    /// Elementwise gain on the linear-momentum derivative (dimensionless).
    pub gain_lin: Vector3<f64>,
    /// Elementwise gain on the angular-momentum derivative (dimensionless).
    pub gain_ang: Vector3<f64>,
    /// Total mass, kg.
    pub mass: f64,
    /// Diagonal rotational inertia, kg m^2.
    pub inertia: Vector3<f64>,
    /// Gravitational acceleration, m/s^2.
    pub gravity: Vector3<f64>,
}

impl DynParams {
    /// Unit gains on a rough biped torso scale.
    pub fn default_biped() -> Self {
        Self {
            gain_lin: Vector3::new(1.0, 1.0, 1.0),
            gain_ang: Vector3::new(1.0, 1.0, 1.0),
            mass: 30.0,
            inertia: Vector3::new(1.5, 1.2, 0.8),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.gain_lin.iter().chain(self.gain_ang.iter()).all(|g| *g > 0.0)
            && self.mass > 0.0
            && self.inertia.iter().all(|i| *i > 0.0);
        if !positive {
            return Err(Error::Config("dynamics gains, mass, inertia must be positive".into()));
        }
        if !(self.gain_lin.iter().all(|g| g.is_finite())
            && self.gain_ang.iter().all(|g| g.is_finite())
            && self.mass.is_finite()
            && self.inertia.iter().all(|i| i.is_finite())
            && self.gravity.iter().all(|g| g.is_finite()))
        {
            return Err(Error::NonFinite { context: "dynamics parameters" });
        }
        Ok(())
    }
}

/// Wrench applied directly to the momentum derivatives (pushes, process
/// noise). Never scaled by the realization gains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExternalWrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl ExternalWrench {
    pub const ZERO: ExternalWrench = ExternalWrench {
        force: Vector3::new(0.0, 0.0, 0.0),
        torque: Vector3::new(0.0, 0.0, 0.0),
    };
}

/// Exact partial derivatives of the discrete RK4 map.
#[derive(Clone, Debug)]
pub struct StepPartials {
    /// d(step)/d(x), 18x18.
    pub wrt_state: SMatrix<f64, 18, 18>,
    /// d(step)/d(u), 18x18.
    pub wrt_input: SMatrix<f64, 18, 18>,
    /// d(step)/d([gain_lin, gain_ang]), 18x6.
    pub wrt_gains: SMatrix<f64, 18, 6>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse ZYX Euler-rate matrix: maps world angular velocity to
/// (roll, pitch, yaw) rates. Singular at |pitch| = pi/2.
fn euler_rate_inverse(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (pitch, yaw) = (euler[1], euler[2]);
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let tp = sp / cp;
    Matrix3::new(
        cy / cp, sy / cp, 0.0,
        -sy, cy, 0.0,
        cy * tp, sy * tp, 1.0,
    )
}

fn check_pitch(xv: &StateVector) -> Result<()> {
    let pitch_abs = xv[state_index::BASE_EULER + 1].abs();
    if pitch_abs >= std::f64::consts::FRAC_PI_2 - EULER_PITCH_MARGIN {
        return Err(Error::EulerSingular { pitch_abs });
    }
    Ok(())
}

/// Continuous derivative on flattened vectors. `ext` adds to the momentum
/// derivatives without gain scaling.
fn derivative_vec(
    xv: &StateVector,
    uv: &InputVector,
    phase: &PhasePair,
    p: &DynParams,
    ext: &ExternalWrench,
) -> Result<StateVector> {
    check_pitch(xv)?;

    let mut dx = StateVector::zeros();
    let f: [Vector3<f64>; 2] = [
        uv.fixed_rows::<3>(input_index::FORCE[0]).into(),
        uv.fixed_rows::<3>(input_index::FORCE[1]).into(),
    ];
    let m: [Vector3<f64>; 2] = [
        uv.fixed_rows::<3>(input_index::MOMENT[0]).into(),
        uv.fixed_rows::<3>(input_index::MOMENT[1]).into(),
    ];
    let base_pos: Vector3<f64> = xv.fixed_rows::<3>(state_index::BASE_POS).into();

    // Linear momentum.
    let f_sum = f[0] + f[1];
    let h_lin_dot = p.gain_lin.component_mul(&f_sum) + p.mass * p.gravity + ext.force;
    dx.fixed_rows_mut::<3>(state_index::H_LIN).copy_from(&h_lin_dot);

    // Angular momentum about the CoM.
    let mut torque = Vector3::zeros();
    for i in 0..2 {
        let r: Vector3<f64> = Vector3::from(xv.fixed_rows::<3>(state_index::FOOT[i])) - base_pos;
        torque += r.cross(&f[i]) + m[i];
    }
    let h_ang_dot = p.gain_ang.component_mul(&torque) + ext.torque;
    dx.fixed_rows_mut::<3>(state_index::H_ANG).copy_from(&h_ang_dot);

    // Base kinematics.
    let h_lin: Vector3<f64> = xv.fixed_rows::<3>(state_index::H_LIN).into();
    dx.fixed_rows_mut::<3>(state_index::BASE_POS).copy_from(&(h_lin / p.mass));

    let euler: Vector3<f64> = xv.fixed_rows::<3>(state_index::BASE_EULER).into();
    let h_ang: Vector3<f64> = xv.fixed_rows::<3>(state_index::H_ANG).into();
    let omega = h_ang.component_div(&p.inertia);
    dx.fixed_rows_mut::<3>(state_index::BASE_EULER)
        .copy_from(&(euler_rate_inverse(&euler) * omega));

    // Feet: swing feet follow the commanded velocity, stance feet are pinned.
    for (i, side) in crate::state::Side::BOTH.iter().enumerate() {
        if phase.is_swing(*side) {
            let v: Vector3<f64> = uv.fixed_rows::<3>(input_index::FOOT_VEL[i]).into();
            dx.fixed_rows_mut::<3>(state_index::FOOT[i]).copy_from(&v);
        }
    }
    Ok(dx)
}

/// Partials of the continuous derivative at one point.
struct DerivPartials {
    fx: SMatrix<f64, 18, 18>,
    fu: SMatrix<f64, 18, 18>,
    fg: SMatrix<f64, 18, 6>,
}

fn derivative_partials_vec(
    xv: &StateVector,
    uv: &InputVector,
    phase: &PhasePair,
    p: &DynParams,
) -> Result<DerivPartials> {
    check_pitch(xv)?;

    let mut fx = SMatrix::<f64, 18, 18>::zeros();
    let mut fu = SMatrix::<f64, 18, 18>::zeros();
    let mut fg = SMatrix::<f64, 18, 6>::zeros();

    let f: [Vector3<f64>; 2] = [
        uv.fixed_rows::<3>(input_index::FORCE[0]).into(),
        uv.fixed_rows::<3>(input_index::FORCE[1]).into(),
    ];
    let base_pos: Vector3<f64> = xv.fixed_rows::<3>(state_index::BASE_POS).into();
    let gl = Matrix3::from_diagonal(&p.gain_lin);
    let ga = Matrix3::from_diagonal(&p.gain_ang);

    // h_lin' rows.
    for i in 0..2 {
        fu.fixed_view_mut::<3, 3>(state_index::H_LIN, input_index::FORCE[i]).copy_from(&gl);
    }
    let f_sum = f[0] + f[1];
    for j in 0..3 {
        fg[(state_index::H_LIN + j, j)] = f_sum[j];
    }

    // h_ang' rows.
    let mut torque = Vector3::zeros();
    let mut dtorque_dpb = Matrix3::zeros();
    for i in 0..2 {
        let r: Vector3<f64> = Vector3::from(xv.fixed_rows::<3>(state_index::FOOT[i])) - base_pos;
        torque += r.cross(&f[i]) + Vector3::from(uv.fixed_rows::<3>(input_index::MOMENT[i]));
        let f_skew = skew(&f[i]);
        // d(r x f)/d(p_i) = -[f]x ; d(r x f)/d(p_b) = +[f]x.
        fx.fixed_view_mut::<3, 3>(state_index::H_ANG, state_index::FOOT[i]).copy_from(&(-ga * f_skew));
        dtorque_dpb += f_skew;
        fu.fixed_view_mut::<3, 3>(state_index::H_ANG, input_index::FORCE[i]).copy_from(&(ga * skew(&r)));
        fu.fixed_view_mut::<3, 3>(state_index::H_ANG, input_index::MOMENT[i]).copy_from(&ga);
    }
    fx.fixed_view_mut::<3, 3>(state_index::H_ANG, state_index::BASE_POS).copy_from(&(ga * dtorque_dpb));
    for j in 0..3 {
        fg[(state_index::H_ANG + j, 3 + j)] = torque[j];
    }

    // p_b' rows.
    for j in 0..3 {
        fx[(state_index::BASE_POS + j, state_index::H_LIN + j)] = 1.0 / p.mass;
    }

    // Euler-rate rows.
    let euler: Vector3<f64> = xv.fixed_rows::<3>(state_index::BASE_EULER).into();
    let h_ang: Vector3<f64> = xv.fixed_rows::<3>(state_index::H_ANG).into();
    let omega = h_ang.component_div(&p.inertia);
    let e_inv = euler_rate_inverse(&euler);
    let inertia_inv = Matrix3::from_diagonal(&Vector3::new(
        1.0 / p.inertia[0],
        1.0 / p.inertia[1],
        1.0 / p.inertia[2],
    ));
    fx.fixed_view_mut::<3, 3>(state_index::BASE_EULER, state_index::H_ANG)
        .copy_from(&(e_inv * inertia_inv));

    // d(Einv(e) w)/d(e): only pitch and yaw enter.
    let (sp, cp) = euler[1].sin_cos();
    let (sy, cy) = euler[2].sin_cos();
    let a = cy * omega.x + sy * omega.y;
    let b = -sy * omega.x + cy * omega.y;
    let mut de = Matrix3::zeros();
    de[(0, 1)] = a * sp / (cp * cp);
    de[(0, 2)] = b / cp;
    de[(1, 2)] = -a;
    de[(2, 1)] = a / (cp * cp);
    de[(2, 2)] = b * sp / cp;
    fx.fixed_view_mut::<3, 3>(state_index::BASE_EULER, state_index::BASE_EULER).copy_from(&de);

    // Foot rows.
    for (i, side) in crate::state::Side::BOTH.iter().enumerate() {
        if phase.is_swing(*side) {
            for j in 0..3 {
                fu[(state_index::FOOT[i] + j, input_index::FOOT_VEL[i] + j)] = 1.0;
            }
        }
    }

    Ok(DerivPartials { fx, fu, fg })
}

/// Continuous state derivative. Errors on non-finite inputs or a pitch at
/// the Euler singularity.
pub fn continuous_derivative(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    p: &DynParams,
) -> Result<StateVector> {
    continuous_derivative_ext(x, u, phase, p, &ExternalWrench::ZERO)
}

/// Continuous derivative with an additive external wrench on the momentum
/// derivatives.
pub fn continuous_derivative_ext(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    p: &DynParams,
    ext: &ExternalWrench,
) -> Result<StateVector> {
    let xv = x.to_vector();
    let uv = u.to_vector();
    if !xv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "state" });
    }
    if !uv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "input" });
    }
    derivative_vec(&xv, &uv, phase, p, ext)
}

fn rk4_vec(
    xv: &StateVector,
    uv: &InputVector,
    phase: &PhasePair,
    p: &DynParams,
    dt: f64,
    ext: &ExternalWrench,
) -> Result<StateVector> {
    let k1 = derivative_vec(xv, uv, phase, p, ext)?;
    let k2 = derivative_vec(&(xv + k1 * (dt / 2.0)), uv, phase, p, ext)?;
    let k3 = derivative_vec(&(xv + k2 * (dt / 2.0)), uv, phase, p, ext)?;
    let k4 = derivative_vec(&(xv + k3 * dt), uv, phase, p, ext)?;
    Ok(xv + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// One RK4 step with input, phase, and external wrench held constant.
pub fn step(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    p: &DynParams,
    dt: f64,
) -> Result<ReducedState> {
    step_ext(x, u, phase, p, dt, &ExternalWrench::ZERO)
}

/// [`step`] with an additive external wrench (disturbances, noise).
pub fn step_ext(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    p: &DynParams,
    dt: f64,
    ext: &ExternalWrench,
) -> Result<ReducedState> {
    debug_assert!(dt > 0.0);
    instrument::count_model_step();
    let xv = x.to_vector();
    let uv = u.to_vector();
    if !xv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "state" });
    }
    if !uv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "input" });
    }
    let next = rk4_vec(&xv, &uv, phase, p, dt, ext)?;
    if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        return Err(Error::Diverged { stage: 0 });
    }
    Ok(ReducedState::from_vector(&next))
}

/// Exact partials of the discrete RK4 map with respect to the state, the
/// input, and the learnable gains. Differentiates the integrator itself:
/// each RK4 stage is chained through the partials of the continuous
/// derivative at its evaluation point.
pub fn step_partials(
    x: &ReducedState,
    u: &ControlInput,
    phase: &PhasePair,
    p: &DynParams,
    dt: f64,
) -> Result<StepPartials> {
    let xv = x.to_vector();
    let uv = u.to_vector();
    if !xv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "state" });
    }
    if !uv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "input" });
    }
    let ext = ExternalWrench::ZERO;
    let eye = SMatrix::<f64, 18, 18>::identity();

    let k1 = derivative_vec(&xv, &uv, phase, p, &ext)?;
    let d1 = derivative_partials_vec(&xv, &uv, phase, p)?;

    let x2 = xv + k1 * (dt / 2.0);
    let k2 = derivative_vec(&x2, &uv, phase, p, &ext)?;
    let d2 = derivative_partials_vec(&x2, &uv, phase, p)?;
    // Chain: x2 depends on (x, u, gains) through k1.
    let k2x = d2.fx * (eye + d1.fx * (dt / 2.0));
    let k2u = d2.fx * (d1.fu * (dt / 2.0)) + d2.fu;
    let k2g = d2.fx * (d1.fg * (dt / 2.0)) + d2.fg;

    let x3 = xv + k2 * (dt / 2.0);
    let k3 = derivative_vec(&x3, &uv, phase, p, &ext)?;
    let d3 = derivative_partials_vec(&x3, &uv, phase, p)?;
    let k3x = d3.fx * (eye + k2x * (dt / 2.0));
    let k3u = d3.fx * (k2u * (dt / 2.0)) + d3.fu;
    let k3g = d3.fx * (k2g * (dt / 2.0)) + d3.fg;

    let x4 = xv + k3 * dt;
    let d4 = derivative_partials_vec(&x4, &uv, phase, p)?;
    let k4x = d4.fx * (eye + k3x * dt);
    let k4u = d4.fx * (k3u * dt) + d4.fu;
    let k4g = d4.fx * (k3g * dt) + d4.fg;

    Ok(StepPartials {
        wrt_state: eye + (d1.fx + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0),
        wrt_input: (d1.fu + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0),
        wrt_gains: (d1.fg + k2g * 2.0 + k3g * 2.0 + k4g) * (dt / 6.0),
    })
}
