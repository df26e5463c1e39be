//! Reduced biped state and input vectors.
//!
//! The reduced model keeps the centroidal momentum and a minimal
//! configuration: base (= CoM) position, ZYX Euler orientation, and the two
//! feet as Cartesian points. State and input are both 18-dimensional:
//!
//! ```text
//! x = [h_lin(3), h_ang(3), p_b(3), theta_b(3), p_L(3), p_R(3)]
//! u = [f_L(3), m_L(3), f_R(3), m_R(3), v_L(3), v_R(3)]
//! ```
//!
//! `theta_b` is (roll, pitch, yaw) with rotation R = Rz(yaw) Ry(pitch)
//! Rx(roll). The Euler-rate mapping is nonsingular while |pitch| stays
//! below pi/2 by [`EULER_PITCH_MARGIN`].

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Dimension of the reduced state.
pub const STATE_DIM: usize = 18;
/// Dimension of the control input.
pub const INPUT_DIM: usize = 18;

/// Margin keeping the pitch away from the Euler singularity, in rad.
pub const EULER_PITCH_MARGIN: f64 = 1e-3;

/// Flattened state vector.
pub type StateVector = SVector<f64, STATE_DIM>;
/// Flattened input vector.
pub type InputVector = SVector<f64, INPUT_DIM>;

/// Foot identifier. `Side::index()` matches the state/input block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// State block offsets in the flattened layout.
pub mod state_index {
    pub const H_LIN: usize = 0;
    pub const H_ANG: usize = 3;
    pub const BASE_POS: usize = 6;
    pub const BASE_EULER: usize = 9;
    pub const FOOT: [usize; 2] = [12, 15];
}

/// Input block offsets in the flattened layout.
pub mod input_index {
    pub const FORCE: [usize; 2] = [0, 6];
    pub const MOMENT: [usize; 2] = [3, 9];
    pub const FOOT_VEL: [usize; 2] = [12, 15];
}

/// State of the reduced biped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// Linear centroidal momentum, kg m/s, inertial frame.
    pub lin_momentum: Vector3<f64>,
    /// Angular centroidal momentum, kg m^2/s, inertial frame.
    pub ang_momentum: Vector3<f64>,
    /// Base (= CoM) position, m, inertial frame.
    pub base_pos: Vector3<f64>,
    /// Base orientation as ZYX Euler angles (roll, pitch, yaw), rad.
    pub base_euler: Vector3<f64>,
    /// Foot contact points [left, right], m, inertial frame.
    pub foot_pos: [Vector3<f64>; 2],
}

impl ReducedState {
    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(state_index::H_LIN)
            .copy_from(&self.lin_momentum);
        x.fixed_rows_mut::<3>(state_index::H_ANG)
            .copy_from(&self.ang_momentum);
        x.fixed_rows_mut::<3>(state_index::BASE_POS)
            .copy_from(&self.base_pos);
        x.fixed_rows_mut::<3>(state_index::BASE_EULER)
            .copy_from(&self.base_euler);
        x.fixed_rows_mut::<3>(state_index::FOOT[0])
            .copy_from(&self.foot_pos[0]);
        x.fixed_rows_mut::<3>(state_index::FOOT[1])
            .copy_from(&self.foot_pos[1]);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            lin_momentum: x.fixed_rows::<3>(state_index::H_LIN).into(),
            ang_momentum: x.fixed_rows::<3>(state_index::H_ANG).into(),
            base_pos: x.fixed_rows::<3>(state_index::BASE_POS).into(),
            base_euler: x.fixed_rows::<3>(state_index::BASE_EULER).into(),
            foot_pos: [
                x.fixed_rows::<3>(state_index::FOOT[0]).into(),
                x.fixed_rows::<3>(state_index::FOOT[1]).into(),
            ],
        }
    }

    pub fn pitch(&self) -> f64 {
        self.base_euler[1]
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Check the state invariants: finite components and nonsingular pitch.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite { context: "state" });
        }
        let pitch_abs = self.pitch().abs();
        if pitch_abs >= std::f64::consts::FRAC_PI_2 - EULER_PITCH_MARGIN {
            return Err(Error::EulerSingular { pitch_abs });
        }
        Ok(())
    }

    /// A rest state at the given base position with feet on the ground.
    pub fn standing(base_pos: Vector3<f64>, foot_left: Vector3<f64>, foot_right: Vector3<f64>) -> Self {
        Self {
            lin_momentum: Vector3::zeros(),
            ang_momentum: Vector3::zeros(),
            base_pos,
            base_euler: Vector3::zeros(),
            foot_pos: [foot_left, foot_right],
        }
    }
}

/// Commanded contact wrenches and foot velocities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Contact forces [left, right], N.
    pub force: [Vector3<f64>; 2],
    /// Contact moments [left, right], N m.
    pub moment: [Vector3<f64>; 2],
    /// Commanded foot velocities [left, right], m/s.
    pub foot_vel: [Vector3<f64>; 2],
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            force: [Vector3::zeros(); 2],
            moment: [Vector3::zeros(); 2],
            foot_vel: [Vector3::zeros(); 2],
        }
    }

    pub fn to_vector(&self) -> InputVector {
        let mut u = InputVector::zeros();
        for i in 0..2 {
            u.fixed_rows_mut::<3>(input_index::FORCE[i]).copy_from(&self.force[i]);
            u.fixed_rows_mut::<3>(input_index::MOMENT[i]).copy_from(&self.moment[i]);
            u.fixed_rows_mut::<3>(input_index::FOOT_VEL[i]).copy_from(&self.foot_vel[i]);
        }
        u
    }

    pub fn from_vector(u: &InputVector) -> Self {
        Self {
            force: [
                u.fixed_rows::<3>(input_index::FORCE[0]).into(),
                u.fixed_rows::<3>(input_index::FORCE[1]).into(),
            ],
            moment: [
                u.fixed_rows::<3>(input_index::MOMENT[0]).into(),
                u.fixed_rows::<3>(input_index::MOMENT[1]).into(),
            ],
            foot_vel: [
                u.fixed_rows::<3>(input_index::FOOT_VEL[0]).into(),
                u.fixed_rows::<3>(input_index::FOOT_VEL[1]).into(),
            ],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Input holding a rest state upright: vertical forces splitting the
    /// robot weight over both feet, everything else zero. This is the
    /// exact dynamics fixed point when the linear gains are 1.
    pub fn standing_equilibrium(mass: f64, gravity_z: f64) -> Self {
        let fz = -mass * gravity_z / 2.0;
        let mut u = Self::zero();
        u.force[0].z = fz;
        u.force[1].z = fz;
        u
    }
}
