//! Log compression and per-element standardization of Mel spectrograms.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, NdfError, Result};

/// Offset inside the logarithm so that zero magnitudes stay finite.
pub const EPS_LOG: f64 = 1e-4;

/// Lower bound on every per-element standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

/// Per-element mean and standard deviation of `log(mel + EPS_LOG)` over a set
/// of spectrograms (the training split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalingStats {
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut logs = Vec::new();
        for mel in mels {
            if count == 0 {
                sum = vec![0.0; mel.len()];
                sum_sq = vec![0.0; mel.len()];
            } else if mel.len() != sum.len() {
                return dim_err(format!(
                    "spectrogram of {} values among ones of {}",
                    mel.len(),
                    sum.len()
                ));
            }
            logs.push(mel.iter().map(|&m| (m + EPS_LOG).ln()).collect::<Vec<_>>());
            count += 1;
        }
        if count == 0 {
            return Err(NdfError::DegenerateInput("no spectrograms to fit".into()));
        }
        // Two passes for a numerically stable variance.
        for l in &logs {
            for (s, v) in sum.iter_mut().zip(l) {
                *s += v;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for l in &logs {
            for ((q, v), m) in sum_sq.iter_mut().zip(l).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let std = sum_sq
            .iter()
            .map(|q| (q / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ScalingStats { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.mean.len() {
            return dim_err(format!("{n} values against stats of {}", self.mean.len()));
        }
        Ok(())
    }

    /// `(log(mel + EPS_LOG) - mean) / std`.
    pub fn log_standardize(&self, mel: &[f64]) -> Result<Vec<f64>> {
        self.check(mel.len())?;
        Ok(mel
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&m, mu), sd)| ((m + EPS_LOG).ln() - mu) / sd)
            .collect())
    }

    /// Inverse of [`log_standardize`](Self::log_standardize), floored at zero.
    pub fn destandardize_exp(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y.len())?;
        Ok(y.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, mu), sd)| ((v * sd + mu).exp() - EPS_LOG).max(0.0))
            .collect())
    }
}
