//! The "real environment": reduced dynamics with systematic mismatch, a
//! first-order command-realization filter standing in for the tracking
//! stack, scripted pushes, and closed-loop rollout collection.
//!
//! Mismatch enters in two places the predictive model does not see:
//! ground-truth wrench-realization gains in place of the learnable gains,
//! and an exponential lag on the realized wrench. External pushes act on
//! the body directly, so they are added to the momentum derivatives and
//! never pass through the realization gains.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gait::GaitSchedule;
use crate::model::{self, DynParams, ExternalWrench};
use crate::mpc::{self, CommandVelocity, NominalPose, RecedingHorizonController};
use crate::objective::{self, CostParams, ReferencePoint};
use crate::state::{ControlInput, ReducedState, Side};
use crate::valuation::{Trajectory, TrajectoryRecord};
use crate::Result;

/// Anything that maps (state, time) to a control input.
pub trait Policy {
    fn act(&mut self, s: &ReducedState, t: f64) -> Result<ControlInput>;
}

impl Policy for RecedingHorizonController {
    fn act(&mut self, s: &ReducedState, t: f64) -> Result<ControlInput> {
        self.policy_step(s, t)
    }
}

impl<F> Policy for F
where
    F: FnMut(&ReducedState, f64) -> Result<ControlInput>,
{
    fn act(&mut self, s: &ReducedState, t: f64) -> Result<ControlInput> {
        self(s, t)
    }
}

/// Ground-truth realization parameters and disturbance/noise settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    /// True wrench-realization gains (what the learnable gains absorb).
    pub gain_lin: Vector3<f64>,
    pub gain_ang: Vector3<f64>,
    /// First-order lag on realized wrenches, s (0 = exact realization).
    pub actuator_tau: f64,
    /// Per-channel Gaussian noise on the momentum derivatives.
    pub noise_std_lin: Vector3<f64>,
    pub noise_std_ang: Vector3<f64>,
    pub rng_seed: u64,
    /// Fall detection: episode ends below this base height, m.
    pub fall_min_height: f64,
    /// Fall detection: episode ends beyond this roll/pitch, rad.
    pub fall_max_tilt: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            gain_lin: Vector3::new(0.85, 0.85, 0.92),
            gain_ang: Vector3::new(0.80, 0.80, 0.88),
            actuator_tau: 0.05,
            noise_std_lin: Vector3::zeros(),
            noise_std_ang: Vector3::zeros(),
            rng_seed: 0,
            fall_min_height: 0.3,
            fall_max_tilt: 0.6,
        }
    }
}

impl PlantConfig {
    /// No mismatch at all: the plant replays the predictive model.
    pub fn exact() -> Self {
        Self {
            gain_lin: Vector3::new(1.0, 1.0, 1.0),
            gain_ang: Vector3::new(1.0, 1.0, 1.0),
            actuator_tau: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain_lin.iter().all(|g| *g > 0.0) && self.gain_ang.iter().all(|g| *g > 0.0)) {
            return Err(Error::Config("plant gains must be positive".into()));
        }
        if self.actuator_tau < 0.0 {
            return Err(Error::Config("actuator tau must be nonnegative".into()));
        }
        if self.noise_std_lin.iter().chain(self.noise_std_ang.iter()).any(|s| *s < 0.0) {
            return Err(Error::Config("noise std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One external push: a constant wrench over a time window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbancePulse {
    pub start: f64,
    pub duration: f64,
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl DisturbancePulse {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Time-sorted, non-overlapping pushes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceProfile {
    pub pulses: Vec<DisturbancePulse>,
}

impl DisturbanceProfile {
    pub fn none() -> Self {
        Self { pulses: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pulses {
            if !(p.duration > 0.0) {
                return Err(Error::Config("pulse durations must be positive".into()));
            }
        }
        for w in self.pulses.windows(2) {
            if w[0].end() > w[1].start {
                return Err(Error::Config("disturbance pulses must not overlap".into()));
            }
        }
        Ok(())
    }

    /// Same pulses shifted in time by `offset` seconds.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            pulses: self
                .pulses
                .iter()
                .map(|p| DisturbancePulse { start: p.start + offset, ..*p })
                .collect(),
        }
    }

    /// Active external wrench at time `t` (the plant samples step
    /// midpoints so pulse boundaries land cleanly on the step grid).
    pub fn wrench_at(&self, t: f64) -> ExternalWrench {
        let mut w = ExternalWrench::ZERO;
        for p in &self.pulses {
            if t >= p.start && t < p.end() {
                w.force += p.force;
                w.torque += p.torque;
            }
        }
        w
    }
}

/// The scripted lateral-push benchmark: three lateral force pulses of
/// 18 N for 0.10 s and one yaw torque pulse of 8 N m for 0.06 s.
pub fn schedule_benchmark_disturbances() -> DisturbanceProfile {
    let lateral = |start: f64| DisturbancePulse {
        start,
        duration: 0.10,
        force: Vector3::new(0.0, 18.0, 0.0),
        torque: Vector3::zeros(),
    };
    DisturbanceProfile {
        pulses: vec![
            lateral(12.00),
            lateral(12.75),
            DisturbancePulse {
                start: 13.05,
                duration: 0.06,
                force: Vector3::zeros(),
                torque: Vector3::new(0.0, 0.0, 8.0),
            },
            lateral(13.55),
        ],
    }
}

/// Result of one plant step.
#[derive(Clone, Copy, Debug)]
pub struct PlantStep {
    pub next_state: ReducedState,
    /// Task stage cost of the pre-step (state, commanded input) pair
    /// under the frozen nominal weights.
    pub stage_cost: f64,
    /// True when the next state trips fall detection.
    pub fell: bool,
}

/// Simulated environment. Owns its noise stream and actuator filter
/// state; one instance per episode.
pub struct Plant {
    pub state: ReducedState,
    step_index: u64,
    dt: f64,
    true_dynamics: DynParams,
    nominal_dynamics: DynParams,
    schedule: GaitSchedule,
    command: CommandVelocity,
    nominal_pose: NominalPose,
    task_weights: CostParams,
    config: PlantConfig,
    disturbances: DisturbanceProfile,
    realized_force: [Vector3<f64>; 2],
    realized_moment: [Vector3<f64>; 2],
    rng: ChaCha8Rng,
    pub fallen: bool,
}

impl Plant {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        initial_state: ReducedState,
        dt: f64,
        nominal_dynamics: DynParams,
        schedule: GaitSchedule,
        command: CommandVelocity,
        nominal_pose: NominalPose,
        task_weights: CostParams,
        config: PlantConfig,
        disturbances: DisturbanceProfile,
    ) -> Result<Self> {
        config.validate()?;
        disturbances.validate()?;
        let mut true_dynamics = nominal_dynamics.clone();
        true_dynamics.gain_lin = config.gain_lin;
        true_dynamics.gain_ang = config.gain_ang;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            state: initial_state,
            step_index: 0,
            dt,
            true_dynamics,
            nominal_dynamics,
            schedule,
            command,
            nominal_pose,
            task_weights,
            config,
            disturbances,
            realized_force: [Vector3::zeros(); 2],
            realized_moment: [Vector3::zeros(); 2],
            rng,
            fallen: false,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn schedule(&self) -> &GaitSchedule {
        &self.schedule
    }

    /// Tracking reference of the task at time `t`.
    pub fn reference_at(&self, t: f64) -> ReferencePoint {
        mpc::reference_point(
            &self.command,
            &self.schedule,
            &self.nominal_pose,
            &self.nominal_dynamics,
            t,
        )
    }

    /// Realized wrench currently held by the actuator filter.
    pub fn realized_wrench(&self, side: Side) -> (Vector3<f64>, Vector3<f64>) {
        let i = side.index();
        (self.realized_force[i], self.realized_moment[i])
    }

    /// Advance one step under the commanded input. The returned stage
    /// cost is the task cost of the pre-step pair `(state, command)`.
    pub fn plant_step(
        &mut self,
        command: &ControlInput,
        reference: &ReferencePoint,
    ) -> Result<PlantStep> {
        let t = self.time();
        let phase = self.schedule.phase_at(t);
        let stage_cost = objective::stage_cost(
            &self.state,
            command,
            reference,
            &phase,
            &self.task_weights,
            &self.nominal_dynamics,
        )?;

        // Exact discrete first-order lag on the realized wrench.
        if self.config.actuator_tau > 0.0 {
            let beta = (-self.dt / self.config.actuator_tau).exp();
            for i in 0..2 {
                self.realized_force[i] =
                    beta * self.realized_force[i] + (1.0 - beta) * command.force[i];
                self.realized_moment[i] =
                    beta * self.realized_moment[i] + (1.0 - beta) * command.moment[i];
            }
        } else {
            self.realized_force = command.force;
            self.realized_moment = command.moment;
        }
        let applied = ControlInput {
            force: self.realized_force,
            moment: self.realized_moment,
            foot_vel: command.foot_vel,
        };

        // Pushes sampled at the step midpoint; they bypass the gains.
        let mut ext = self.disturbances.wrench_at(t + 0.5 * self.dt);
        let noisy = self
            .config
            .noise_std_lin
            .iter()
            .chain(self.config.noise_std_ang.iter())
            .any(|s| *s > 0.0);
        if noisy {
            for j in 0..3 {
                if self.config.noise_std_lin[j] > 0.0 {
                    let n = Normal::new(0.0, self.config.noise_std_lin[j]).expect("valid std");
                    ext.force[j] += n.sample(&mut self.rng);
                }
            }
            for j in 0..3 {
                if self.config.noise_std_ang[j] > 0.0 {
                    let n = Normal::new(0.0, self.config.noise_std_ang[j]).expect("valid std");
                    ext.torque[j] += n.sample(&mut self.rng);
                }
            }
        }

        let next = model::step_ext(&self.state, &applied, &phase, &self.true_dynamics, self.dt, &ext)
            .map_err(|e| e.at_stage(self.step_index as usize))?;

        let fell = next.base_pos.z < self.config.fall_min_height
            || next.base_euler[0].abs() > self.config.fall_max_tilt
            || next.base_euler[1].abs() > self.config.fall_max_tilt;

        self.state = next;
        self.step_index += 1;
        self.fallen = self.fallen || fell;
        Ok(PlantStep { next_state: next, stage_cost, fell })
    }
}

/// Run the closed loop for `steps` steps and log the trajectory. A fall
/// truncates the episode and sets the trajectory flag; the truncated
/// prefix is still valid training data.
pub fn collect_rollout(
    policy: &mut dyn Policy,
    plant: &mut Plant,
    steps: usize,
) -> Result<Trajectory> {
    let dt = plant.dt;
    let mut records = Vec::with_capacity(steps);
    let mut truncated = false;
    for _ in 0..steps {
        let t = plant.time();
        let state = plant.state;
        let phase = plant.schedule.phase_at(t);
        let reference = plant.reference_at(t);
        let action = policy.act(&state, t)?;
        let outcome = plant.plant_step(&action, &reference)?;
        records.push(TrajectoryRecord {
            time: t,
            state,
            action,
            stage_cost: outcome.stage_cost,
            phase,
            reference,
        });
        if outcome.fell {
            truncated = true;
            break;
        }
    }
    Ok(Trajectory { dt, records, truncated_by_fall: truncated })
}
