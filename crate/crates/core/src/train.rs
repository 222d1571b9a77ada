//! Minibatch training of the importance-weighted objective.
//!
//! Each epoch is one pass over a fresh permutation of the rows in
//! `⌈n / batch⌉` steps. The loss of a step is the batch mean of `-L̂_K`.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::model::{BatchNoise, ModelConfig, ModelParams};
use crate::nn::{adam_step, sgd_step, AdamState, ParamTensors};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    10_000
}
fn default_window() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-4
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Importance samples per row; the model's `k` when absent.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "yes")]
    pub early_stopping: bool,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    /// Write a checkpoint every this many epochs (needs `checkpoint_dir`).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Progress line every this many epochs; 0 disables.
    #[serde(default)]
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.001,
            max_epochs: 10_000,
            k: None,
            seed: 0,
            optimizer: Optimizer::Adam,
            early_stopping: true,
            convergence_window: 200,
            convergence_tol: 1e-4,
            checkpoint_every: None,
            checkpoint_dir: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("train.batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            out.push("train.max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push("train.learning_rate must be positive".into());
        }
        if self.k == Some(0) {
            out.push("train.k must be at least 1".into());
        }
        if self.convergence_window < 2 {
            out.push("train.convergence_window must be at least 2".into());
        }
        if !(self.convergence_tol >= 0.0) {
            out.push("train.convergence_tol must be nonnegative".into());
        }
        if self.checkpoint_every == Some(0) {
            out.push("train.checkpoint_every must be at least 1".into());
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            out.push("train.checkpoint_every needs train.checkpoint_dir".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean of `-L̂_K` over the rows, one entry per completed epoch.
    pub epoch_objective: Vec<f64>,
    /// L2 norm of all parameters after each epoch.
    pub param_norms: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Not serialized, so traces of identical runs compare byte for byte.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.epoch_objective.len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: TrainTrace,
}

/// Windowed convergence rule on a minimized objective: compares the mean
/// of the last `window` epochs with the `window` before. True iff the
/// relative improvement is strictly below `tol`. Needs `2·window` epochs.
pub fn early_stop(objective: &[f64], window: usize, tol: f64) -> bool {
    assert!(window >= 2, "window must be at least 2");
    let n = objective.len();
    if n < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let cur = mean(&objective[n - window..]);
    let prev = mean(&objective[n - 2 * window..n - window]);
    let improvement = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
    improvement < tol
}

fn zero_grads(g: &mut ModelParams) {
    for t in g.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Trains a fresh model on `table`. Random streams derived from the seed:
/// 0 initializes weights, 1 shuffles, 2 draws importance noise.
pub fn train(table: &DataTable, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(table, initial_params(model_config, config.seed)?, config)
}

/// The parameters [`train`] starts from for a given training seed.
pub fn initial_params(model_config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::new(model_config, &mut SeededRng::new(seed).substream(0))
}

/// Continues training from `params`.
pub fn train_from(table: &DataTable, mut params: ModelParams, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = table.n_rows();
    if table.n_cols() != params.p() {
        return Err(Error::Shape(format!(
            "table has {} columns, model expects {}",
            table.n_cols(),
            params.p()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("cannot train on an empty table".into()));
    }
    if let Some(i) = (0..n).find(|&i| table.row_all_missing(i)) {
        return Err(Error::Domain(format!("row {i} has no observed entries")));
    }
    let k = config.k.unwrap_or(params.config.k);
    let root = SeededRng::new(config.seed);
    let mut shuffle_rng = root.substream(1);
    let mut noise_rng = root.substream(2);
    let mut adam = AdamState::with_learning_rate(&params, config.learning_rate);
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    let start = Instant::now();

    for epoch in 0..config.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let values = table.values.select(Axis(0), rows);
            let mask = table.mask.select(Axis(0), rows);
            let noise = BatchNoise::draw(rows.len(), k, &params.config, &mut noise_rng);
            zero_grads(&mut grads);
            let scale = -1.0 / rows.len() as f64;
            let diverged = |diagnostic: String, params: &ModelParams| Error::Diverged {
                epoch,
                step: b,
                diagnostic,
                last_good: Box::new(params.clone()),
            };
            let lhat = match params.objective_and_gradient(values.view(), mask.view(), &noise, scale, &mut grads) {
                Ok(l) => l,
                Err(e) => return Err(diverged(e.to_string(), &params)),
            };
            let batch_sum: f64 = lhat.iter().sum();
            if !batch_sum.is_finite() {
                return Err(diverged(format!("objective is {batch_sum}"), &params));
            }
            let step = match config.optimizer {
                Optimizer::Adam => adam_step(&mut params, &grads, &mut adam),
                Optimizer::Sgd => sgd_step(&mut params, &grads, config.learning_rate),
            };
            if let Err(e) = step {
                return Err(diverged(e.to_string(), &params));
            }
            params.enforce_structure();
            total -= batch_sum;
            trace.steps += 1;
        }
        params.epochs_trained += 1;
        trace.epoch_objective.push(total / n as f64);
        trace.param_norms.push(params.l2_norm());
        if config.log_every > 0 && (epoch + 1) % config.log_every == 0 {
            log::info!(
                "epoch {}/{} ({} steps): mean -L_K = {:.5}",
                epoch + 1,
                config.max_epochs,
                trace.steps,
                total / n as f64
            );
        }
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("checkpoint_epoch{:06}.json", epoch + 1));
                params.save_checkpoint(path, Some(noise_rng.state()))?;
            }
        }
        if config.early_stopping
            && early_stop(
                &trace.epoch_objective,
                config.convergence_window,
                config.convergence_tol,
            )
        {
            trace.stopped_early = true;
            log::info!("converged after {} epochs", epoch + 1);
            break;
        }
    }
    trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { params, trace })
}
