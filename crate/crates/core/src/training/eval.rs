//! Validation-split metrics for trained (or untrained) models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cwae::{mmd_u_statistic, sample_class_priors, CwaeModel};
use crate::diff::{Graph, BCE_CLAMP};
use crate::error::{NdfError, Result};
use crate::mcnn::{binarize_mask, spectral_losses, McnnModel};
use crate::tensor::Tensor;

use super::corpus::Split;
use super::data::PreparedData;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_items: usize,
    /// Mean per-element reconstruction MSE of standardized log-Mels.
    pub cwae_val_mse: f64,
    /// SC and SC_log of MCNN outputs (binarized mask) from ground-truth Mels.
    pub mcnn_sc: f64,
    pub mcnn_sc_log: f64,
    pub mask_bce: f64,
    /// Fraction of samples whose binarized mask matches the support.
    pub mask_accuracy: f64,
    /// SC and SC_log of the full chain: encode, decode, invert.
    pub e2e_sc: f64,
    pub e2e_sc_log: f64,
    /// MMD² between each class's validation codes and prior draws.
    pub per_class_mmd: Vec<f64>,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        [
            self.cwae_val_mse,
            self.mcnn_sc,
            self.mcnn_sc_log,
            self.mask_bce,
            self.mask_accuracy,
            self.e2e_sc,
            self.e2e_sc_log,
        ]
        .iter()
        .chain(&self.per_class_mmd)
        .all(|v| v.is_finite())
    }
}

fn sc_pair(data: &PreparedData, estimate: Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let e = g.constant(estimate);
    let (sc, sc_log) = spectral_losses(&mut g, e, target, &data.analyzer)?;
    Ok((g.value(sc).item(), g.value(sc_log).item()))
}

/// Inverter quality on ground-truth Mels of a set of items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McnnMetrics {
    /// SC and SC_log of the generated waveforms (binarized mask).
    pub sc: f64,
    pub sc_log: f64,
    pub mask_bce: f64,
    /// Fraction of samples whose binarized mask matches the support.
    pub mask_accuracy: f64,
}

/// Runs the inverter in generation mode on the items `idx`.
pub fn mcnn_metrics(mcnn: &McnnModel, data: &PreparedData, idx: &[usize]) -> Result<McnnMetrics> {
    if idx.is_empty() {
        return Err(NdfError::Corpus("no items to evaluate".into()));
    }
    let target = data.wave_batch(idx)?;
    let support = data.mask_batch(idx);
    let out = mcnn.generate(&data.mel_batch(idx)?)?;
    let (sc, sc_log) = sc_pair(data, Tensor::new(&[idx.len(), out.len], out.waveform)?, &target)?;
    let mask_bce = out
        .mask
        .iter()
        .zip(&support)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / support.len() as f64;
    let hits = binarize_mask(&out.mask)
        .iter()
        .zip(&support)
        .filter(|(b, t)| **b == (**t > 0.5))
        .count();
    Ok(McnnMetrics {
        sc,
        sc_log,
        mask_bce,
        mask_accuracy: hits as f64 / support.len() as f64,
    })
}

/// Evaluates both models on the validation split. `seed` fixes the prior
/// draws of the MMD estimates.
pub fn evaluate(cwae: &CwaeModel, mcnn: &McnnModel, data: &PreparedData, seed: u64) -> Result<EvalReport> {
    let idx = data.indices(Split::Val);
    if idx.is_empty() {
        return Err(NdfError::Corpus("validation split is empty".into()));
    }
    let n = idx.len();
    let labels = data.labels_of(&idx);
    let x = data.scaled_batch(&idx)?;
    let z = cwae.encode(&x, &labels)?;
    let x_hat = cwae.decode(&z, &labels)?;
    let cwae_val_mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64;

    let mcnn_only = mcnn_metrics(mcnn, data, &idx)?;
    let target = data.wave_batch(&idx)?;
    let len = data.dsp.canonical_len;

    let mut mel_hat = Vec::with_capacity(x_hat.numel());
    let per = data.dsp.n_mels * data.dsp.n_frames();
    for i in 0..n {
        mel_hat.extend(data.stats.destandardize_exp(&x_hat.data()[i * per..(i + 1) * per])?);
    }
    let e2e = mcnn.generate(&Tensor::new(x_hat.shape(), mel_hat)?)?;
    let (e2e_sc, e2e_sc_log) = sc_pair(data, Tensor::new(&[n, len], e2e.waveform)?, &target)?;

    let d_z = cwae.config().d_z;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class_mmd = Vec::with_capacity(data.n_classes);
    for c in 0..data.n_classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if rows.len() < 2 {
            per_class_mmd.push(f64::NAN);
            continue;
        }
        let codes: Vec<f64> = rows.iter().flat_map(|&i| z.outer(i).iter().copied()).collect();
        let codes = Tensor::new(&[rows.len(), d_z], codes)?;
        let prior = sample_class_priors(&mut rng, &vec![0; rows.len()], 1, d_z)?.remove(0);
        per_class_mmd.push(mmd_u_statistic(&codes, &prior, cwae.config().kernel_scale())?);
    }

    let report = EvalReport {
        n_items: n,
        cwae_val_mse,
        mcnn_sc: mcnn_only.sc,
        mcnn_sc_log: mcnn_only.sc_log,
        mask_bce: mcnn_only.mask_bce,
        mask_accuracy: mcnn_only.mask_accuracy,
        e2e_sc,
        e2e_sc_log,
        per_class_mmd,
    };
    if report.e2e_sc > report.mcnn_sc + report.cwae_val_mse {
        log::info!(
            "end-to-end SC {:.4} exceeds MCNN SC {:.4} plus CWAE MSE {:.4}",
            report.e2e_sc,
            report.mcnn_sc,
            report.cwae_val_mse
        );
    }
    Ok(report)
}
