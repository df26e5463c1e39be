//! Cost-matching learning: loss, gradients, projected SGD, and descent
//! diagnostics.
//!
//! The loss is the mean squared discrepancy between the rollout surrogate
//! value and the measured discounted return over sampled anchors. Its
//! gradient is the batch mean of `2 (Q^mpc - Q^meas) grad Q^mpc`, so a
//! training update never solves the deployment problem; it only
//! differentiates length-N rollouts.
//!
//! Updates are plain projected SGD with a constant step size: clamp to the
//! elementwise lower bounds after each step. With a full batch and a step
//! of `1 / L_hat` (see [`estimate_smoothness`]) the loss sequence is
//! monotonically nonincreasing, which the acceptance suite asserts.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintConfig;
use crate::error::Error;
use crate::seeds;
use crate::valuation::{self, ParamVector, Trajectory, PARAM_DIM};
use crate::Result;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    /// Discount factor for measured returns, in (0, 1].
    pub discount: f64,
    /// SGD step size.
    pub step_size: f64,
    pub batch_size: usize,
    pub updates_per_round: usize,
    pub rounds: usize,
    /// Valuation horizon N (kept equal to the deployment horizon).
    pub horizon: usize,
    /// Lower bound for the dynamics gains.
    pub gain_floor: f64,
    /// Lower bound for cost weights.
    pub weight_floor: f64,
    /// Held-out fraction of anchors per round, never used for updates.
    pub validation_fraction: f64,
    pub rng_seed: u64,
    /// Optional per-coordinate learn mask (false = frozen). None learns
    /// everything.
    pub learn_mask: Option<Vec<bool>>,
    /// Derive the step size per round as `1 / L_hat` from
    /// [`estimate_smoothness`] on that round's data (constant within the
    /// round). `step_size` is used as given when false.
    pub auto_step_size: bool,
    /// Probe count for the per-round smoothness estimate.
    pub smoothness_probes: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            discount: 0.985,
            step_size: 1e-5,
            batch_size: 16,
            updates_per_round: 300,
            rounds: 5,
            horizon: 20,
            gain_floor: 1e-3,
            weight_floor: 0.0,
            validation_fraction: 0.2,
            rng_seed: 0,
            learn_mask: None,
            auto_step_size: true,
            smoothness_probes: 4,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config("discount must be in (0, 1]".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        if self.batch_size == 0 || self.horizon == 0 {
            return Err(Error::Config("batch size and horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        if let Some(mask) = &self.learn_mask {
            if mask.len() != PARAM_DIM {
                return Err(Error::Config(format!(
                    "learn mask must have {PARAM_DIM} entries"
                )));
            }
        }
        Ok(())
    }

    pub fn lower_bounds(&self) -> DVector<f64> {
        ParamVector::lower_bounds(self.gain_floor, self.weight_floor)
    }
}

/// A (trajectory, time index) pair where both the surrogate and the
/// measured return are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub traj: usize,
    pub index: usize,
}

/// All valid anchors of a dataset for the given horizon.
pub fn valid_anchors(dataset: &[Trajectory], horizon: usize) -> Vec<Anchor> {
    let mut anchors = Vec::new();
    for (t, traj) in dataset.iter().enumerate() {
        if let Some(max_anchor) = traj.max_anchor(horizon) {
            for k in 0..=max_anchor {
                anchors.push(Anchor { traj: t, index: k });
            }
        }
    }
    anchors
}

/// Measured discounted returns for every trajectory.
pub fn measured_returns(dataset: &[Trajectory], discount: f64) -> Vec<Vec<f64>> {
    dataset.iter().map(|t| valuation::q_meas_all(t, discount)).collect()
}

fn sample_value(
    theta: &ParamVector,
    dataset: &[Trajectory],
    targets: &[Vec<f64>],
    anchor: Anchor,
    horizon: usize,
    cfg: &ConstraintConfig,
) -> Result<(f64, f64)> {
    let traj = &dataset[anchor.traj];
    let segment = traj
        .segment(anchor.index, horizon)
        .ok_or(Error::InsufficientData { horizon })?;
    let eval = valuation::q_mpc(theta, &traj.records[anchor.index].state, &segment, cfg)?;
    Ok((eval.value, targets[anchor.traj][anchor.index]))
}

/// Mean squared value mismatch over a batch of anchors.
pub fn matching_loss(
    theta: &ParamVector,
    dataset: &[Trajectory],
    targets: &[Vec<f64>],
    batch: &[Anchor],
    horizon: usize,
    cfg: &ConstraintConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { horizon });
    }
    let per_sample: Result<Vec<f64>> = batch
        .par_iter()
        .map(|a| {
            let (value, target) = sample_value(theta, dataset, targets, *a, horizon, cfg)?;
            let r = value - target;
            Ok(r * r)
        })
        .collect();
    // Fixed-order reduction keeps the result bitwise deterministic.
    Ok(per_sample?.iter().sum::<f64>() / batch.len() as f64)
}

/// Batch gradient of [`matching_loss`]: mean of
/// `2 (Q^mpc - target) grad Q^mpc`. Also returns the batch loss.
pub fn loss_gradient(
    theta: &ParamVector,
    dataset: &[Trajectory],
    targets: &[Vec<f64>],
    batch: &[Anchor],
    horizon: usize,
    cfg: &ConstraintConfig,
) -> Result<(DVector<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { horizon });
    }
    let per_sample: Result<Vec<(DVector<f64>, f64)>> = batch
        .par_iter()
        .map(|a| {
            let traj = &dataset[a.traj];
            let segment = traj
                .segment(a.index, horizon)
                .ok_or(Error::InsufficientData { horizon })?;
            let (grad_q, eval) =
                valuation::q_mpc_gradient(theta, &traj.records[a.index].state, &segment, cfg)?;
            let residual = eval.value - targets[a.traj][a.index];
            Ok((grad_q * (2.0 * residual), residual * residual))
        })
        .collect();
    let per_sample = per_sample?;
    let mut grad = DVector::zeros(PARAM_DIM);
    let mut loss = 0.0;
    for (g, l) in &per_sample {
        grad += g;
        loss += l;
    }
    let inv = 1.0 / batch.len() as f64;
    Ok((grad * inv, loss * inv))
}

/// Projected SGD update on the flat parameter vector:
/// `theta' = clamp(theta - alpha g, lower_bounds, +inf)`, with frozen
/// coordinates (mask = false) left untouched.
pub fn sgd_step(theta_flat: &DVector<f64>, grad: &DVector<f64>, cfg: &LearnConfig) -> DVector<f64> {
    let bounds = cfg.lower_bounds();
    let mut next = theta_flat.clone();
    for j in 0..PARAM_DIM {
        if let Some(mask) = &cfg.learn_mask {
            if !mask[j] {
                continue;
            }
        }
        next[j] = (theta_flat[j] - cfg.step_size * grad[j]).max(bounds[j]);
    }
    next
}

/// Diagnostics of one training round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub update_losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Held-out MSE before / after the round's updates (None when the
    /// anchor set is too small to hold anything out).
    pub val_mse_pre: Option<f64>,
    pub val_mse_post: Option<f64>,
    pub n_anchors: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Step size actually used and the smoothness estimate behind it
    /// (None when `auto_step_size` is off).
    pub step_size_used: f64,
    pub smoothness_estimate: Option<f64>,
    /// Flat parameter snapshot after the round.
    pub theta_after: Vec<f64>,
}

/// One round of cost-matching updates on a fixed on-policy dataset.
///
/// Per update: sample `batch_size` anchors uniformly (with replacement,
/// resampled every update) from the train split, take one projected SGD
/// step. Deterministic given `cfg.rng_seed`.
pub fn train_round(
    theta: &ParamVector,
    dataset: &[Trajectory],
    cfg: &LearnConfig,
    constraints: &ConstraintConfig,
) -> Result<(ParamVector, RoundDiagnostics)> {
    cfg.validate()?;
    let anchors = valid_anchors(dataset, cfg.horizon);
    if anchors.is_empty() {
        return Err(Error::InsufficientData { horizon: cfg.horizon });
    }
    let targets = measured_returns(dataset, cfg.discount);

    // Held-out split: fixed for the round, never trained on.
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.rng_seed, 0));
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((anchors.len() as f64 * cfg.validation_fraction) as usize).min(anchors.len() - 1);
    let val: Vec<Anchor> = order[..n_val].iter().map(|i| anchors[*i]).collect();
    let train: Vec<Anchor> = order[n_val..].iter().map(|i| anchors[*i]).collect();

    let val_mse = |theta: &ParamVector| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(matching_loss(theta, dataset, &targets, &val, cfg.horizon, constraints)?))
    };

    let val_mse_pre = val_mse(theta)?;

    // Effective config for the updates: optionally size the step from the
    // estimated gradient-Lipschitz constant of this round's data.
    let mut effective = cfg.clone();
    let mut smoothness = None;
    if cfg.auto_step_size && cfg.updates_per_round > 0 {
        let l_hat = estimate_smoothness(
            theta,
            dataset,
            cfg.smoothness_probes.max(2),
            seeds::derive(cfg.rng_seed, 2),
            cfg,
            constraints,
        )?;
        if l_hat > 0.0 {
            effective.step_size = 1.0 / l_hat;
        }
        smoothness = Some(l_hat);
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.rng_seed, 1));
    let mut current = theta.clone();
    let mut flat = current.flatten();
    let mut update_losses = Vec::with_capacity(cfg.updates_per_round);
    let mut grad_norms = Vec::with_capacity(cfg.updates_per_round);

    for _ in 0..cfg.updates_per_round {
        let batch: Vec<Anchor> = (0..cfg.batch_size)
            .map(|_| train[batch_rng.random_range(0..train.len())])
            .collect();
        let (grad, loss) =
            loss_gradient(&current, dataset, &targets, &batch, cfg.horizon, constraints)?;
        update_losses.push(loss);
        grad_norms.push(grad.norm());
        flat = sgd_step(&flat, &grad, &effective);
        current.assign_flat(&flat);
    }

    let val_mse_post = val_mse(&current)?;

    let diag = RoundDiagnostics {
        update_losses,
        grad_norms,
        val_mse_pre,
        val_mse_post,
        n_anchors: anchors.len(),
        n_train: train.len(),
        n_val: val.len(),
        step_size_used: effective.step_size,
        smoothness_estimate: smoothness,
        theta_after: flat.iter().copied().collect(),
    };
    Ok((current, diag))
}

/// Empirical gradient-Lipschitz estimate: twice the largest observed
/// `|grad L(theta + d) - grad L(theta)| / |d|` over probe pairs inside the
/// feasible box. Probe directions follow the gradient differences
/// (power-iteration style), which tracks the top curvature direction of
/// the strongly anisotropic loss far better than isotropic probing.
/// `1 / L_hat` is a safe full-batch step size.
pub fn estimate_smoothness(
    theta: &ParamVector,
    dataset: &[Trajectory],
    probes: usize,
    seed: u64,
    cfg: &LearnConfig,
    constraints: &ConstraintConfig,
) -> Result<f64> {
    if probes < 2 {
        return Err(Error::Config("smoothness estimation needs at least 2 probes".into()));
    }
    let anchors = valid_anchors(dataset, cfg.horizon);
    if anchors.is_empty() {
        return Err(Error::InsufficientData { horizon: cfg.horizon });
    }
    let targets = measured_returns(dataset, cfg.discount);
    let (g0, _) = loss_gradient(theta, dataset, &targets, &anchors, cfg.horizon, constraints)?;

    let flat = theta.flatten();
    let bounds = cfg.lower_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learnable: Vec<bool> = (0..PARAM_DIM)
        .map(|j| cfg.learn_mask.as_ref().map_or(true, |m| m[j]))
        .collect();
    // Per-coordinate probe radius: grown weights must not inflate the
    // probe step applied to the far more sensitive gain coordinates.
    let radius: Vec<f64> = (0..PARAM_DIM).map(|j| 1e-4 * flat[j].abs().max(1.0)).collect();

    let random_direction = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(PARAM_DIM, |j, _| {
            if learnable[j] {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
    };

    let mut direction = if g0.norm() > 0.0 { g0.clone() } else { random_direction(&mut rng) };
    let mut max_ratio = 0.0_f64;
    for _ in 0..probes {
        let dn = direction.norm();
        if dn == 0.0 {
            direction = random_direction(&mut rng);
            continue;
        }
        let mut probe = flat.clone();
        for j in 0..PARAM_DIM {
            if learnable[j] {
                probe[j] = flat[j] + direction[j] / dn * radius[j];
            }
            probe[j] = probe[j].max(bounds[j]);
        }
        let delta = &probe - &flat;
        let delta_norm = delta.norm();
        if delta_norm == 0.0 {
            direction = random_direction(&mut rng);
            continue;
        }
        let mut perturbed = theta.clone();
        perturbed.assign_flat(&probe);
        let (g1, _) = loss_gradient(&perturbed, dataset, &targets, &anchors, cfg.horizon, constraints)?;
        let diff = &g1 - &g0;
        max_ratio = max_ratio.max(diff.norm() / delta_norm);
        direction = if diff.norm() > 0.0 { diff } else { random_direction(&mut rng) };
    }
    Ok(2.0 * max_ratio)
}
