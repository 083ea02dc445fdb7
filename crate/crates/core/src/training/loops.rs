//! CWAE and MCNN training loops.
//!
//! Both loops share the same contract: ADAM steps on sampled mini-batches, a
//! validation pass at the end of every epoch feeding a plateau scheduler, the
//! best-validation parameters restored at the end, and an immediate abort on a
//! non-finite loss or gradient.

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cwae::{
    class_rows, per_class_regularizer, reconstruction_mse_sum, sample_class_priors, CwaeModel,
    Phase,
};
use crate::diff::{Adam, Graph, ParamSet, PlateauScheduler, Var};
use crate::error::{NdfError, Result};
use crate::mcnn::McnnModel;
use crate::tensor::Tensor;

use super::corpus::Split;
use super::data::PreparedData;
use super::sampler::{BalancedSampler, ShuffledSampler};

/// Mixed into the training seed for the fixed validation prior draws.
const VAL_PRIOR_SALT: u64 = 0x5eed_0f7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwaeTrainConfig {
    /// Items of each class per batch.
    pub per_class_n: usize,
    pub iterations: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
}

impl CwaeTrainConfig {
    pub fn full() -> Self {
        CwaeTrainConfig {
            per_class_n: 64,
            iterations: 110_000,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McnnTrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
}

impl McnnTrainConfig {
    pub fn full() -> Self {
        McnnTrainConfig {
            batch_size: 128,
            iterations: 50_000,
            lr: 1e-4,
            plateau_factor: 0.2,
            plateau_patience: 50,
        }
    }

    pub fn desk() -> Self {
        McnnTrainConfig {
            batch_size: 16,
            iterations: 2000,
            lr: 3e-3,
            ..McnnTrainConfig::full()
        }
    }
}

/// One row of a loss curve, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iteration: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Monitored validation loss.
    pub val_loss: f64,
    /// Headline validation metric: reconstruction MSE (CWAE) or SC (MCNN).
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub initial_val_metric: f64,
    /// Validation loss of the model as it stood after the last iteration.
    pub final_val_loss: f64,
    /// Validation loss and metric of the restored best model.
    pub best_val_loss: f64,
    pub best_val_metric: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Validation {
    loss: f64,
    metric: f64,
}

fn check_finite(value: f64, what: &str, iteration: usize, lr: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(NdfError::NumericFailure(format!(
            "{what} became {value} at iteration {iteration} (lr {lr:.3e})"
        )))
    }
}

fn gradients(g: &Graph, loss: Var, vars: &[Var], params: &ParamSet) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect())
}

fn first_non_finite(grads: &[Tensor], params: &ParamSet) -> Option<String> {
    grads
        .iter()
        .zip(params.iter())
        .find(|(g, _)| !g.is_finite())
        .map(|(_, (name, _))| name.to_string())
}

/// Validation objective of the CWAE in inference mode: mean per-sample MSE plus
/// `β · D_Z` against prior draws fixed by `seed`. The metric is the MSE alone.
fn validate_cwae(model: &CwaeModel, data: &PreparedData, idx: &[usize], seed: u64) -> Result<Validation> {
    let labels = data.labels_of(idx);
    let mut g = Graph::new();
    let b = model.params().bind_constant(&mut g);
    let x = g.constant(data.scaled_batch(idx)?);
    let z = model.encode_graph(&mut g, &b, x, &labels, Phase::Eval, &mut Vec::new())?;
    let x_hat = model.decode_graph(&mut g, &b, z, &labels, Phase::Eval, &mut Vec::new())?;
    let mse_sum = reconstruction_mse_sum(&mut g, x, x_hat)?;
    let mse = g.value(mse_sum).item() / idx.len() as f64;
    let cfg = model.config();
    let counts_ok = class_rows(&labels, cfg.n_classes)?
        .iter()
        .all(|r| r.len() >= 2);
    let reg = if counts_ok {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priors = sample_class_priors(&mut rng, &labels, cfg.n_classes, cfg.d_z)?;
        let r = per_class_regularizer(&mut g, z, &labels, &priors, cfg.kernel_scale())?;
        g.value(r).item()
    } else {
        0.0
    };
    Ok(Validation {
        loss: mse + cfg.beta * reg,
        metric: mse,
    })
}

/// Validation objective of the MCNN: the full training loss on the validation
/// split (soft mask); the metric is its SC term.
fn validate_mcnn(model: &McnnModel, data: &PreparedData, idx: &[usize]) -> Result<Validation> {
    let mut g = Graph::new();
    let b = model.params().bind_constant(&mut g);
    let mel = g.constant(data.mel_batch(idx)?);
    let target = data.wave_batch(idx)?;
    let (_, loss) = model.loss_graph(&mut g, &b, mel, &target, &data.mask_batch(idx), &data.analyzer)?;
    Ok(Validation {
        loss: g.value(loss.total).item(),
        metric: g.value(loss.sc).item(),
    })
}

/// Trains `model` in place and leaves it holding the best-validation state.
pub fn train_cwae(
    model: &mut CwaeModel,
    data: &PreparedData,
    cfg: &CwaeTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let mcfg = model.config().clone();
    if mcfg.n_classes != data.n_classes || mcfg.n_mels != data.dsp.n_mels || mcfg.n_frames != data.dsp.n_frames() {
        return Err(NdfError::Config("CWAE configuration does not match the data".into()));
    }
    let val_idx = data.indices(Split::Val);
    if val_idx.is_empty() {
        return Err(NdfError::Corpus("validation split is empty".into()));
    }
    let val_seed = seed ^ VAL_PRIOR_SALT;
    let mut sampler = BalancedSampler::new(data.by_class(Split::Train), cfg.per_class_n, seed)?;
    let mut prior_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);

    let initial = validate_cwae(model, data, &val_idx, val_seed)?;
    info!(
        "cwae: {} parameters, batch {}, initial val loss {:.4} (mse {:.4})",
        model.params().num_values(),
        sampler.batch_size(),
        initial.loss,
        initial.metric
    );
    let mut best = (initial, model.clone());
    let mut curve = Vec::new();
    let (mut epoch_loss, mut epoch_batches) = (0.0, 0usize);
    let mut last = initial;

    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let x = g.constant(data.scaled_batch(&batch.indices)?);
        let priors = sample_class_priors(&mut prior_rng, &batch.labels, mcfg.n_classes, mcfg.d_z)?;
        let mut stats = Vec::new();
        let loss = model.loss_graph(&mut g, &b, x, &batch.labels, &priors, &mut stats)?;
        let value = g.value(loss.total).item();
        check_finite(value, "CWAE loss", it, adam.lr())?;
        let grads = gradients(&g, loss.total, b.vars(), model.params())?;
        if let Some(name) = first_non_finite(&grads, model.params()) {
            return Err(NdfError::NumericFailure(format!(
                "non-finite gradient for {name} at iteration {it}"
            )));
        }
        adam.step(model.params_mut(), &grads)?;
        model.update_running(&stats);
        epoch_loss += value;
        epoch_batches += 1;

        if batch.epoch_end || it == cfg.iterations {
            let val = validate_cwae(model, data, &val_idx, val_seed)?;
            check_finite(val.loss, "CWAE validation loss", it, adam.lr())?;
            if batch.epoch_end && sched.step(val.loss) {
                adam.set_lr(sched.lr());
                info!("cwae: plateau at iteration {it}, lr -> {:.3e}", sched.lr());
            }
            let rec = EpochRecord {
                epoch: curve.len() + 1,
                iteration: it,
                train_loss: epoch_loss / epoch_batches as f64,
                val_loss: val.loss,
                val_metric: val.metric,
                lr: adam.lr(),
            };
            debug!("cwae: {rec:?}");
            curve.push(rec);
            if val.loss < best.0.loss {
                best = (val, model.clone());
            }
            last = val;
            epoch_loss = 0.0;
            epoch_batches = 0;
        }
    }
    *model = best.1;
    info!(
        "cwae: done, best val loss {:.4} (mse {:.4}), final {:.4}",
        best.0.loss, best.0.metric, last.loss
    );
    Ok(TrainReport {
        curve,
        initial_val_loss: initial.loss,
        initial_val_metric: initial.metric,
        final_val_loss: last.loss,
        best_val_loss: best.0.loss,
        best_val_metric: best.0.metric,
        iterations: cfg.iterations,
    })
}

/// Trains `model` in place on unscaled Mel spectrograms and leaves it holding
/// the best-validation parameters.
pub fn train_mcnn(
    model: &mut McnnModel,
    data: &PreparedData,
    cfg: &McnnTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if model.config().n_mels != data.dsp.n_mels || model.config().upsampling() != data.dsp.hop {
        return Err(NdfError::Config("MCNN configuration does not match the data".into()));
    }
    let val_idx = data.indices(Split::Val);
    let train_idx = data.indices(Split::Train);
    if val_idx.is_empty() || train_idx.is_empty() {
        return Err(NdfError::Corpus("empty training or validation split".into()));
    }
    let labels = data.labels_of(&train_idx);
    let mut sampler = ShuffledSampler::new(train_idx, labels, cfg.batch_size, seed)?;
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);

    let initial = validate_mcnn(model, data, &val_idx)?;
    info!(
        "mcnn: {} parameters, batch {}, initial val loss {:.4} (sc {:.4})",
        model.params().num_values(),
        sampler.batch_size(),
        initial.loss,
        initial.metric
    );
    let mut best = (initial, model.params().clone());
    let mut curve = Vec::new();
    let (mut epoch_loss, mut epoch_batches) = (0.0, 0usize);
    let mut last = initial;

    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let mel = g.constant(data.mel_batch(&batch.indices)?);
        let target = data.wave_batch(&batch.indices)?;
        let mask = data.mask_batch(&batch.indices);
        let (_, loss) = model.loss_graph(&mut g, &b, mel, &target, &mask, &data.analyzer)?;
        let value = g.value(loss.total).item();
        check_finite(value, "MCNN loss", it, adam.lr())?;
        let grads = gradients(&g, loss.total, b.vars(), model.params())?;
        if let Some(name) = first_non_finite(&grads, model.params()) {
            return Err(NdfError::NumericFailure(format!(
                "non-finite gradient for {name} at iteration {it}"
            )));
        }
        adam.step(model.params_mut(), &grads)?;
        epoch_loss += value;
        epoch_batches += 1;

        if batch.epoch_end || it == cfg.iterations {
            let val = validate_mcnn(model, data, &val_idx)?;
            check_finite(val.loss, "MCNN validation loss", it, adam.lr())?;
            if batch.epoch_end && sched.step(val.loss) {
                adam.set_lr(sched.lr());
                info!("mcnn: plateau at iteration {it}, lr -> {:.3e}", sched.lr());
            }
            let rec = EpochRecord {
                epoch: curve.len() + 1,
                iteration: it,
                train_loss: epoch_loss / epoch_batches as f64,
                val_loss: val.loss,
                val_metric: val.metric,
                lr: adam.lr(),
            };
            debug!("mcnn: {rec:?}");
            curve.push(rec);
            if val.loss < best.0.loss {
                best = (val, model.params().clone());
            }
            last = val;
            epoch_loss = 0.0;
            epoch_batches = 0;
        }
    }
    model.load_params(best.1)?;
    info!(
        "mcnn: done, best val loss {:.4} (sc {:.4}), final {:.4}",
        best.0.loss, best.0.metric, last.loss
    );
    Ok(TrainReport {
        curve,
        initial_val_loss: initial.loss,
        initial_val_metric: initial.metric,
        final_val_loss: last.loss,
        best_val_loss: best.0.loss,
        best_val_metric: best.0.metric,
        iterations: cfg.iterations,
    })
}

/// Validation loss of a trained CWAE under the training loop's definition.
pub fn cwae_validation_loss(model: &CwaeModel, data: &PreparedData, seed: u64) -> Result<f64> {
    validate_cwae(model, data, &data.indices(Split::Val), seed ^ VAL_PRIOR_SALT).map(|v| v.loss)
}

/// Validation loss of a trained MCNN under the training loop's definition.
pub fn mcnn_validation_loss(model: &McnnModel, data: &PreparedData) -> Result<f64> {
    validate_mcnn(model, data, &data.indices(Split::Val)).map(|v| v.loss)
}
