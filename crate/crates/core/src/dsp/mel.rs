//! Triangular Mel filterbank and the STFT → Mel projection.

use std::ops::Range;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filterbank matrix `F` of shape `[n_bins × n_mels]`, so that `Mel = STFTᵀ × F`
/// column by column. Filters span 0 Hz to Nyquist, are triangular on the
/// fractional-bin axis, and are area-normalized (each filter sums to 1).
///
/// A filter narrower than one FFT bin is widened to one bin on each side so that
/// every Mel band has at least one nonzero weight.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    n_mels: usize,
    weights: Vec<f64>,
    support: Vec<Range<usize>>,
}

impl MelFilterbank {
    pub fn new(n_bins: usize, n_mels: usize, sample_rate: u32) -> Result<Self> {
        if n_bins < 2 || n_mels == 0 {
            return dim_err(format!("invalid filterbank size {n_bins}×{n_mels}"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let bin_of = |hz: f64| hz / nyquist * (n_bins - 1) as f64;
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| bin_of(mel_to_hz(top * i as f64 / (n_mels + 1) as f64)))
            .collect();

        let mut weights = vec![0.0; n_bins * n_mels];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let lw = (center - left).max(1.0);
            let rw = (right - center).max(1.0);
            let lo = (center - lw).ceil().max(0.0) as usize;
            let hi = ((center + rw).floor() as usize + 1).min(n_bins);
            let mut total = 0.0;
            for b in lo..hi {
                let x = b as f64;
                let w = if x <= center {
                    1.0 - (center - x) / lw
                } else {
                    1.0 - (x - center) / rw
                };
                if w > 0.0 {
                    weights[b * n_mels + m] = w;
                    total += w;
                }
            }
            for b in lo..hi {
                weights[b * n_mels + m] /= total;
            }
            let first = (lo..hi).find(|&b| weights[b * n_mels + m] > 0.0).unwrap_or(lo);
            let last = (lo..hi).rev().find(|&b| weights[b * n_mels + m] > 0.0).unwrap_or(lo);
            support.push(first..last + 1);
        }
        Ok(MelFilterbank {
            n_bins,
            n_mels,
            weights,
            support,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn weight(&self, bin: usize, mel: usize) -> f64 {
        self.weights[bin * self.n_mels + mel]
    }

    /// Bins with nonzero weight for Mel band `mel`.
    pub fn support(&self, mel: usize) -> Range<usize> {
        self.support[mel].clone()
    }

    pub fn matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.n_bins, self.n_mels], self.weights.clone())
    }

    /// Projects magnitudes `[n_bins × frames]` to `[n_mels × frames]`.
    pub fn project(&self, stft: &[f64], frames: usize) -> Result<Vec<f64>> {
        if stft.len() != self.n_bins * frames {
            return dim_err(format!(
                "STFT has {} values, expected {}×{frames}",
                stft.len(),
                self.n_bins
            ));
        }
        let mut out = vec![0.0; self.n_mels * frames];
        self.project_into(stft, frames, &mut out);
        Ok(out)
    }

    pub(crate) fn project_into(&self, stft: &[f64], frames: usize, out: &mut [f64]) {
        for m in 0..self.n_mels {
            let row = &mut out[m * frames..(m + 1) * frames];
            for b in self.support(m) {
                let w = self.weights[b * self.n_mels + m];
                let src = &stft[b * frames..(b + 1) * frames];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    /// Adjoint of [`project`](Self::project): `[n_mels × frames]` → `[n_bins × frames]`.
    pub(crate) fn project_transpose_into(&self, grad: &[f64], frames: usize, out: &mut [f64]) {
        for m in 0..self.n_mels {
            let g = &grad[m * frames..(m + 1) * frames];
            for b in self.support(m) {
                let w = self.weights[b * self.n_mels + m];
                let dst = &mut out[b * frames..(b + 1) * frames];
                for (o, gv) in dst.iter_mut().zip(g) {
                    *o += w * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn full_scale_shape_and_coverage() {
        let bank = MelFilterbank::new(1025, 512, 22050).unwrap();
        let f = bank.matrix();
        assert_eq!(f.shape(), &[1025, 512]);
        assert!(f.data().iter().all(|&w| w >= 0.0));
        for m in 0..512 {
            let col: f64 = (0..1025).map(|b| bank.weight(b, m)).sum();
            assert!((col - 1.0).abs() < 1e-12, "filter {m} sums to {col}");
            assert!(!bank.support(m).is_empty());
        }
    }

    #[test]
    fn all_ones_spectrum_maps_to_positive_mels() {
        let bank = MelFilterbank::new(65, 64, 22050).unwrap();
        let mel = bank.project(&[1.0; 65], 1).unwrap();
        assert!(mel.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn centers_increase_with_band() {
        let bank = MelFilterbank::new(1025, 512, 22050).unwrap();
        let centroid = |m: usize| -> f64 {
            (0..1025).map(|b| b as f64 * bank.weight(b, m)).sum::<f64>()
        };
        for m in 1..512 {
            assert!(centroid(m) >= centroid(m - 1));
        }
    }
}
