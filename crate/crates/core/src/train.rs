//! The DP-SGD training loop.
//!
//! Poisson-subsampled batches, per-trajectory gradients computed in parallel,
//! clipping plus Gaussian noising, plain SGD updates, and an accountant that
//! stops the loop before the budget would be exceeded. With an infinite
//! budget target and zero noise the loop degrades to ordinary SGD, which the
//! tests use as the noiseless baseline.

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::GradientSet;
use crate::dp::{accountant_epsilon, clip_and_noise, AccountantState, NoiseParams};
use crate::model::{sequence_loss, ModelParams};
use crate::preprocess::Dataset;
use crate::rng;
use crate::{Error, Result};

/// Training configuration. `sigma: None` asks the planner for the smallest
/// noise multiplier that fits the budget over the full step count.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// L2 clip norm; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub sigma: Option<f64>,
    /// Expected batch size; the Poisson rate is `batch / |D|`.
    pub expected_batch: usize,
    pub max_epochs: f64,
    pub learning_rate: f64,
    /// DP-SGD budget; `f64::INFINITY` runs non-private.
    pub epsilon_sgd: f64,
    pub delta: f64,
    pub seed: u64,
    /// Score coarse resolutions alongside the finest one (hierarchical).
    pub multitask: bool,
    /// Write a checkpoint every N steps into `checkpoint_dir` (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_norm: 1.0,
            sigma: None,
            expected_batch: 64,
            max_epochs: 10.0,
            learning_rate: 0.1,
            epsilon_sgd: 1.0,
            delta: 1e-5,
            seed: 0,
            multitask: true,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

/// What the loop actually did, plus the per-step log lines.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub sigma: f64,
    pub sampling_rate: f64,
    /// Epsilon actually spent per the accountant (infinite when
    /// non-private).
    pub epsilon_spent: f64,
    pub delta: f64,
    pub final_loss: f64,
    /// One line per step: index, batch size, pre-noise norm, loss, epsilon.
    pub log: Vec<String>,
}

/// Smallest noise multiplier on a multiplicative grid whose accounted
/// epsilon fits the budget at the given rate and step count.
pub fn plan_noise(epsilon: f64, delta: f64, sampling_rate: f64, max_steps: usize) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Privacy(format!("epsilon {epsilon} must be positive")));
    }
    let grid = sigma_grid();
    let fits = |sigma: f64| -> Result<bool> {
        let eps = accountant_epsilon(
            &NoiseParams {
                clip_norm: 1.0,
                sigma,
                sampling_rate,
                steps: max_steps,
            },
            delta,
        )?;
        Ok(eps <= epsilon)
    };
    if !fits(*grid.last().unwrap())? {
        return Err(Error::Infeasible(format!(
            "no noise multiplier up to {} reaches epsilon {epsilon} at q={sampling_rate}, T={max_steps}",
            grid.last().unwrap()
        )));
    }
    // Epsilon is monotone decreasing in sigma: binary search the grid.
    let mut lo = 0usize;
    let mut hi = grid.len() - 1;
    if fits(grid[0])? {
        return Ok(grid[0]);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(grid[mid])? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(grid[hi])
}

fn sigma_grid() -> Vec<f64> {
    let mut grid = Vec::new();
    let mut sigma = 0.25f64;
    while sigma <= 256.0 {
        grid.push(sigma);
        sigma *= 1.03;
    }
    grid
}

/// Largest step count within `max_steps` whose accounted epsilon stays at or
/// under the budget.
fn max_feasible_steps(
    epsilon: f64,
    delta: f64,
    sigma: f64,
    sampling_rate: f64,
    max_steps: usize,
) -> Result<usize> {
    let eps_at = |steps: usize| -> Result<f64> {
        if steps == 0 {
            return Ok(0.0);
        }
        accountant_epsilon(
            &NoiseParams {
                clip_norm: 1.0,
                sigma,
                sampling_rate,
                steps,
            },
            delta,
        )
    };
    if eps_at(max_steps)? <= epsilon {
        return Ok(max_steps);
    }
    let mut lo = 0usize; // feasible
    let mut hi = max_steps; // infeasible
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if eps_at(mid)? <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Run DP-SGD over the dataset, mutating the parameters in place.
pub fn dpsgd_train(
    params: &mut ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Privacy("empty dataset".into()));
    }
    if !(config.epsilon_sgd > 0.0) {
        return Err(Error::Privacy(format!(
            "epsilon_sgd {} must be positive to train",
            config.epsilon_sgd
        )));
    }
    let n = dataset.len();
    let q = (config.expected_batch as f64 / n as f64).min(1.0);
    let max_steps = ((config.max_epochs * n as f64) / config.expected_batch as f64).ceil() as usize;
    let max_steps = max_steps.max(1);
    let private = config.epsilon_sgd.is_finite();

    let sigma = match config.sigma {
        Some(s) => s,
        None if private => plan_noise(config.epsilon_sgd, config.delta, q, max_steps)?,
        None => 0.0,
    };
    if private && sigma == 0.0 {
        return Err(Error::Privacy(
            "sigma 0 cannot satisfy a finite budget".into(),
        ));
    }

    let steps = if private {
        max_feasible_steps(config.epsilon_sgd, config.delta, sigma, q, max_steps)?
    } else {
        max_steps
    };

    let mut accountant = AccountantState::new(config.delta);
    let mut log = Vec::with_capacity(steps);
    let mut final_loss = f64::NAN;

    for step in 0..steps {
        let mut sample_rng = rng::stream(rng::derive_seed(config.seed, &format!("dpsgd-sample-{step}")));
        let mut noise_rng = rng::stream(rng::derive_seed(config.seed, &format!("dpsgd-noise-{step}")));

        let batch: Vec<usize> = if q >= 1.0 {
            (0..n).collect()
        } else {
            (0..n).filter(|_| sample_rng.gen::<f64>() < q).collect()
        };

        let per_example: Vec<(GradientSet<f64>, f64)> = batch
            .par_iter()
            .map(|&idx| {
                let (lg, loss) =
                    sequence_loss(params, &dataset.trajectories[idx], config.multitask)
                        .expect("loss graph over validated trajectory");
                let value = lg.graph.value(loss).item();
                let mut grads = lg.graph.backward(loss, &params.store);
                grads.example = Some(idx);
                (grads, value)
            })
            .collect();

        let batch_loss = if per_example.is_empty() {
            f64::NAN
        } else {
            per_example.iter().map(|(_, l)| l).sum::<f64>() / per_example.len() as f64
        };

        let grads: Vec<GradientSet<f64>> = per_example.into_iter().map(|(g, _)| g).collect();
        let update = if grads.is_empty() {
            // Empty Poisson draw: the step is pure noise.
            let mut zero = GradientSet::zeros_like(&params.store);
            if sigma > 0.0 {
                let std = sigma * config.clip_norm / config.expected_batch as f64;
                for t in zero.tensors_mut() {
                    for v in t.data_mut() {
                        *v += rng::gaussian(&mut noise_rng, std);
                    }
                }
            }
            zero
        } else {
            clip_and_noise(
                &grads,
                config.clip_norm,
                sigma,
                config.expected_batch,
                &mut noise_rng,
            )?
        };

        let pre_noise_norm: f64 = {
            // Norm of the clipped mean before noise: recompute cheaply from
            // the per-example sets when present.
            if grads.is_empty() {
                0.0
            } else {
                let mut mean = GradientSet::zeros_like(&params.store);
                for g in &grads {
                    let norm = g.l2_norm();
                    let factor = if norm > config.clip_norm {
                        config.clip_norm / norm
                    } else {
                        1.0
                    };
                    mean.axpy(factor, g);
                }
                mean.scale(1.0 / config.expected_batch as f64);
                mean.l2_norm()
            }
        };

        let n_params = params.store.len();
        for i in 0..n_params {
            let id = crate::autodiff::ParamId(i);
            params
                .store
                .get_mut(id)
                .axpy(-config.learning_rate, update.grad(id));
        }

        accountant.step(q, sigma);
        let eps_so_far = if private {
            accountant.epsilon()
        } else {
            f64::INFINITY
        };
        final_loss = batch_loss;
        log.push(format!(
            "step {step} batch {} grad_norm {pre_noise_norm:.6} loss {batch_loss:.6} epsilon {eps_so_far:.6}",
            batch.len()
        ));

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                crate::checkpoint::save_model(params, &dir.join(format!("step-{:06}.ckpt", step + 1)))?;
            }
        }
    }

    let epsilon_spent = if private {
        accountant_epsilon(
            &NoiseParams {
                clip_norm: config.clip_norm,
                sigma,
                sampling_rate: q,
                steps,
            },
            config.delta,
        )?
    } else {
        f64::INFINITY
    };

    Ok(TrainReport {
        steps_run: steps,
        sigma,
        sampling_rate: q,
        epsilon_spent,
        delta: config.delta,
        final_loss,
        log,
    })
}
