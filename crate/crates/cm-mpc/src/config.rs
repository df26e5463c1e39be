//! Run configuration: one TOML file, dotted-path overrides, and a stable
//! content hash stamped into every artifact.

use std::path::{Path, PathBuf};

use nalgebra::{SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::bench::RecoveryParams;
use crate::constraints::{ConstraintConfig, PenaltyWeights};
use crate::error::Error;
use crate::gait::GaitSchedule;
use crate::learner::LearnConfig;
use crate::model::DynParams;
use crate::mpc::{CommandVelocity, NominalPose, SolverConfig};
use crate::objective::CostParams;
use crate::plant::PlantConfig;
use crate::state::ReducedState;
use crate::valuation::ParamVector;
use crate::Result;

/// Serializable cost-weight blocks (plain arrays for readable TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeightsConfig {
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
    pub terminal_weights: Vec<f64>,
    pub base_weights: Vec<f64>,
    pub com_weights: Vec<f64>,
    pub swing_weights: Vec<f64>,
    pub torque_weights: Vec<f64>,
}

impl CostWeightsConfig {
    pub fn resolve(&self) -> Result<CostParams> {
        fn block<const N: usize>(v: &[f64], name: &str) -> Result<SVector<f64, N>> {
            if v.len() != N {
                return Err(Error::Config(format!("{name} needs {N} entries, got {}", v.len())));
            }
            Ok(SVector::from_iterator(v.iter().copied()))
        }
        let c = CostParams {
            state_weights: block::<18>(&self.state_weights, "state_weights")?,
            input_weights: block::<18>(&self.input_weights, "input_weights")?,
            terminal_weights: block::<18>(&self.terminal_weights, "terminal_weights")?,
            base_weights: block::<6>(&self.base_weights, "base_weights")?,
            com_weights: block::<2>(&self.com_weights, "com_weights")?,
            swing_weights: block::<12>(&self.swing_weights, "swing_weights")?,
            torque_weights: block::<3>(&self.torque_weights, "torque_weights")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_params(c: &CostParams) -> Self {
        Self {
            state_weights: c.state_weights.iter().copied().collect(),
            input_weights: c.input_weights.iter().copied().collect(),
            terminal_weights: c.terminal_weights.iter().copied().collect(),
            base_weights: c.base_weights.iter().copied().collect(),
            com_weights: c.com_weights.iter().copied().collect(),
            swing_weights: c.swing_weights.iter().copied().collect(),
            torque_weights: c.torque_weights.iter().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub gravity_z: f64,
    pub initial_gain_lin: [f64; 3],
    pub initial_gain_ang: [f64; 3],
}

impl DynamicsConfig {
    pub fn resolve(&self) -> Result<DynParams> {
        let p = DynParams {
            gain_lin: Vector3::from_row_slice(&self.initial_gain_lin),
            gain_ang: Vector3::from_row_slice(&self.initial_gain_ang),
            mass: self.mass,
            inertia: Vector3::from_row_slice(&self.inertia),
            gravity: Vector3::new(0.0, 0.0, self.gravity_z),
        };
        p.validate()?;
        Ok(p)
    }

    /// Nominal parameters with unit gains (the task/reference model).
    pub fn resolve_nominal(&self) -> Result<DynParams> {
        let mut p = self.resolve()?;
        p.gain_lin = Vector3::new(1.0, 1.0, 1.0);
        p.gain_ang = Vector3::new(1.0, 1.0, 1.0);
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitPreset {
    Standing,
    WalkInPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitConfig {
    pub preset: GaitPreset,
    pub period: f64,
    pub swing_apex: f64,
}

impl GaitConfig {
    pub fn resolve(&self) -> Result<GaitSchedule> {
        let schedule = match self.preset {
            GaitPreset::Standing => GaitSchedule::standing(),
            GaitPreset::WalkInPlace => GaitSchedule::walk_in_place(self.period, self.swing_apex),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandConfig {
    pub linear: [f64; 2],
    pub yaw_rate: f64,
}

impl CommandConfig {
    pub fn resolve(&self) -> CommandVelocity {
        CommandVelocity {
            linear: Vector2::from_row_slice(&self.linear),
            yaw_rate: self.yaw_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalConfig {
    pub com_height: f64,
    pub stance_half_width: f64,
    pub origin_xy: [f64; 2],
    pub step_velocity_gain: f64,
}

impl NominalConfig {
    pub fn resolve(&self) -> NominalPose {
        NominalPose {
            com_height: self.com_height,
            stance_half_width: self.stance_half_width,
            origin_xy: Vector2::from_row_slice(&self.origin_xy),
            step_velocity_gain: self.step_velocity_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsConfig {
    pub friction_mu: f64,
    pub foot_half_length: f64,
    pub foot_half_width: f64,
    pub min_foot_distance: f64,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub min_normal_force: f64,
}

impl ConstraintsConfig {
    pub fn resolve(&self) -> Result<ConstraintConfig> {
        let c = ConstraintConfig {
            friction_mu: self.friction_mu,
            foot_half_length: self.foot_half_length,
            foot_half_width: self.foot_half_width,
            min_foot_distance: self.min_foot_distance,
            workspace_min: Vector3::from_row_slice(&self.workspace_min),
            workspace_max: Vector3::from_row_slice(&self.workspace_max),
            min_normal_force: self.min_normal_force,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub stage_inequality: f64,
    pub stage_equality: f64,
    pub terminal_inequality: f64,
    pub terminal_equality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSection {
    pub gain_lin: [f64; 3],
    pub gain_ang: [f64; 3],
    pub actuator_tau: f64,
    pub noise_std_lin: [f64; 3],
    pub noise_std_ang: [f64; 3],
    pub fall_min_height: f64,
    pub fall_max_tilt: f64,
}

impl PlantSection {
    pub fn resolve(&self, rng_seed: u64) -> Result<PlantConfig> {
        let c = PlantConfig {
            gain_lin: Vector3::from_row_slice(&self.gain_lin),
            gain_ang: Vector3::from_row_slice(&self.gain_ang),
            actuator_tau: self.actuator_tau,
            noise_std_lin: Vector3::from_row_slice(&self.noise_std_lin),
            noise_std_ang: Vector3::from_row_slice(&self.noise_std_ang),
            rng_seed,
            fall_min_height: self.fall_min_height,
            fall_max_tilt: self.fall_max_tilt,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub master_seed: u64,
    pub episodes_per_round: usize,
    pub episode_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSection {
    /// Shift applied to the published pulse schedule, s.
    pub pulse_offset: f64,
    pub episode_steps: usize,
    pub trial_seeds: Vec<u64>,
    pub post_window: f64,
    pub hold: f64,
    pub pre_window: f64,
}

/// The single source of truth for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub dt: f64,
    pub dynamics: DynamicsConfig,
    pub cost_init: CostWeightsConfig,
    pub task_cost: CostWeightsConfig,
    pub penalty: PenaltyConfig,
    pub constraints: ConstraintsConfig,
    pub gait: GaitConfig,
    pub command: CommandConfig,
    pub nominal: NominalConfig,
    pub learner: LearnConfig,
    pub solver: SolverConfig,
    pub plant: PlantSection,
    pub train: TrainSection,
    pub benchmark: BenchmarkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cost_init = CostWeightsConfig {
            state_weights: vec![
                0.2, 0.2, 0.2, // h_lin
                1.0, 1.0, 1.0, // h_ang
                400.0, 400.0, 400.0, // base position
                80.0, 80.0, 80.0, // euler
                150.0, 150.0, 150.0, 150.0, 150.0, 150.0, // feet
            ],
            input_weights: vec![
                2e-4, 2e-4, 1e-4, 2e-3, 2e-3, 2e-3, // left wrench
                2e-4, 2e-4, 1e-4, 2e-3, 2e-3, 2e-3, // right wrench
                0.5, 0.5, 0.5, 0.5, 0.5, 0.5, // foot velocities
            ],
            terminal_weights: vec![
                0.4, 0.4, 0.4, 2.0, 2.0, 2.0, 800.0, 800.0, 800.0, 160.0, 160.0, 160.0, 300.0,
                300.0, 300.0, 300.0, 300.0, 300.0,
            ],
            base_weights: vec![2.0; 6],
            com_weights: vec![50.0; 2],
            swing_weights: vec![10.0; 12],
            torque_weights: vec![1e-4; 3],
        };
        // Frozen task weights: the learning target. Deliberately not the
        // same object as the initial learnable weights.
        let task_cost = CostWeightsConfig {
            state_weights: vec![
                0.05, 0.05, 0.05, 0.5, 0.5, 0.5, 60.0, 60.0, 60.0, 25.0, 25.0, 25.0, 25.0, 25.0,
                25.0, 25.0, 25.0, 25.0,
            ],
            input_weights: vec![
                1e-5, 1e-5, 1e-5, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5, 1e-4, 1e-4, 1e-4, 0.1, 0.1,
                0.1, 0.1, 0.1, 0.1,
            ],
            terminal_weights: vec![0.0; 18],
            base_weights: vec![1.0, 1.0, 1.0, 0.2, 0.2, 0.2],
            com_weights: vec![10.0; 2],
            swing_weights: vec![10.0, 10.0, 10.0, 0.2, 0.2, 0.2, 10.0, 10.0, 10.0, 0.2, 0.2, 0.2],
            torque_weights: vec![1e-4; 3],
        };
        Self {
            run_id: "default".into(),
            output_dir: PathBuf::from("runs"),
            dt: 0.01,
            dynamics: DynamicsConfig {
                mass: 30.0,
                inertia: [1.5, 1.2, 0.8],
                gravity_z: -9.81,
                initial_gain_lin: [1.0; 3],
                initial_gain_ang: [1.0; 3],
            },
            cost_init,
            task_cost,
            penalty: PenaltyConfig {
                stage_inequality: 1e3,
                stage_equality: 1e4,
                terminal_inequality: 1e3,
                terminal_equality: 1e4,
            },
            constraints: ConstraintsConfig {
                friction_mu: 0.7,
                foot_half_length: 0.10,
                foot_half_width: 0.05,
                min_foot_distance: 0.12,
                workspace_min: [-0.35, -0.45, -1.0],
                workspace_max: [0.35, 0.45, -0.35],
                min_normal_force: 0.0,
            },
            gait: GaitConfig {
                preset: GaitPreset::Standing,
                period: 0.8,
                swing_apex: 0.04,
            },
            command: CommandConfig { linear: [0.0, 0.0], yaw_rate: 0.0 },
            nominal: NominalConfig {
                com_height: 0.75,
                stance_half_width: 0.12,
                origin_xy: [0.0, 0.0],
                step_velocity_gain: 0.0,
            },
            learner: LearnConfig::default(),
            solver: SolverConfig::default(),
            plant: PlantSection {
                gain_lin: [0.85, 0.85, 0.92],
                gain_ang: [0.80, 0.80, 0.88],
                actuator_tau: 0.05,
                noise_std_lin: [0.0; 3],
                noise_std_ang: [0.0; 3],
                fall_min_height: 0.3,
                fall_max_tilt: 0.6,
            },
            train: TrainSection {
                master_seed: 7,
                episodes_per_round: 8,
                episode_steps: 300,
            },
            benchmark: BenchmarkSection {
                pulse_offset: -10.0,
                episode_steps: 600,
                trial_seeds: vec![101, 102, 103, 104, 105, 106],
                post_window: 1.5,
                hold: 0.5,
                pre_window: 2.0,
            },
        }
    }
}

/// Fully resolved domain objects derived from a validated [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub theta0: ParamVector,
    pub task_weights: CostParams,
    pub nominal_dynamics: DynParams,
    pub constraints: ConstraintConfig,
    pub schedule: GaitSchedule,
    pub command: CommandVelocity,
    pub nominal_pose: NominalPose,
    pub initial_state: ReducedState,
    pub recovery: RecoveryParams,
    pub config_hash: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    /// Load with dotted-path overrides like `learner.step_size=1e-4`.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: toml::Value = toml::from_str(&text)?;
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Serde(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// FNV-1a over the canonical serialized form, with the run identity
    /// (run_id, output_dir) normalized out: the hash captures what
    /// affects results, not where they are written.
    pub fn content_hash(&self) -> Result<String> {
        let mut semantic = self.clone();
        semantic.run_id = String::new();
        semantic.output_dir = PathBuf::new();
        let text = semantic.to_toml()?;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(format!("{hash:016x}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must not be empty".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if (self.solver.dt - self.dt).abs() > 1e-12 {
            return Err(Error::Config("solver.dt must equal the plant dt".into()));
        }
        self.resolve()?;
        Ok(())
    }

    /// Resolve and validate every section into domain objects.
    pub fn resolve(&self) -> Result<Resolved> {
        let dynamics = self.dynamics.resolve()?;
        let cost = self.cost_init.resolve()?;
        let task_weights = self.task_cost.resolve()?;
        let constraints = self.constraints.resolve()?;
        let schedule = self.gait.resolve()?;
        let nominal_pose = self.nominal.resolve();
        let command = self.command.resolve();
        self.learner.validate()?;
        self.solver.validate()?;
        self.plant.resolve(0)?;
        if self.penalty.stage_inequality <= 0.0
            || self.penalty.stage_equality <= 0.0
            || self.penalty.terminal_inequality <= 0.0
            || self.penalty.terminal_equality <= 0.0
        {
            return Err(Error::Config("penalty weights must be positive".into()));
        }
        let theta0 = ParamVector {
            dynamics,
            cost,
            stage_penalty: PenaltyWeights {
                inequality: self.penalty.stage_inequality,
                equality: self.penalty.stage_equality,
            },
            terminal_penalty: PenaltyWeights {
                inequality: self.penalty.terminal_inequality,
                equality: self.penalty.terminal_equality,
            },
        };
        theta0.validate()?;
        let initial_state = ReducedState::standing(
            Vector3::new(
                self.nominal.origin_xy[0],
                self.nominal.origin_xy[1],
                self.nominal.com_height,
            ),
            Vector3::new(
                self.nominal.origin_xy[0],
                self.nominal.origin_xy[1] + self.nominal.stance_half_width,
                0.0,
            ),
            Vector3::new(
                self.nominal.origin_xy[0],
                self.nominal.origin_xy[1] - self.nominal.stance_half_width,
                0.0,
            ),
        );
        let recovery = RecoveryParams {
            post_window: self.benchmark.post_window,
            hold: self.benchmark.hold,
            pre_window: self.benchmark.pre_window,
        };
        Ok(Resolved {
            theta0,
            task_weights,
            nominal_dynamics: self.dynamics.resolve_nominal()?,
            constraints,
            schedule,
            command,
            nominal_pose,
            initial_state,
            recovery,
            config_hash: self.content_hash()?,
        })
    }
}

fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // Arrays like [1.0, 2.0, 3.0].
    if raw.starts_with('[') {
        if let Ok(v) = toml::from_str::<toml::Value>(&format!("x = {raw}")) {
            if let Some(inner) = v.get("x") {
                return inner.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must look like key.path=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    let mut cursor = value;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override path '{path}' is not a table")))?;
            table.insert(part.to_string(), parse_toml_scalar(raw.trim()));
            return Ok(());
        }
        cursor = cursor
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{path}'")))?;
    }
    Ok(())
}
