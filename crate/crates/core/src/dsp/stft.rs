//! Centered short-time Fourier transform magnitudes with an exact adjoint.
//!
//! Framing: the signal is reflect-padded by `n_fft / 2` on both sides and frame
//! `t` starts at padded offset `t * hop`, so it is centered on sample `t * hop`.
//! Exactly `len / hop` frames are produced, which keeps `frames * hop == len`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{dim_err, Result};

pub struct StftPlan {
    n_fft: usize,
    win_len: usize,
    hop: usize,
    /// Hann window of `win_len`, zero-padded symmetrically to `n_fft`.
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("n_fft", &self.n_fft)
            .field("win_len", &self.win_len)
            .field("hop", &self.hop)
            .finish()
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

impl StftPlan {
    pub fn new(n_fft: usize, win_len: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 || win_len == 0 || win_len > n_fft || hop == 0 {
            return dim_err(format!(
                "invalid STFT geometry: n_fft={n_fft}, win_len={win_len}, hop={hop}"
            ));
        }
        let mut window = vec![0.0; n_fft];
        let offset = (n_fft - win_len) / 2;
        window[offset..offset + win_len].copy_from_slice(&hann(win_len));
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            n_fft,
            win_len,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len % self.hop != 0 || len <= self.n_fft / 2 {
            return dim_err(format!(
                "signal length {len} must be a multiple of hop {} and exceed {}",
                self.hop,
                self.n_fft / 2
            ));
        }
        Ok(())
    }

    /// Maps an index of the reflect-padded signal back to the original signal.
    #[inline]
    fn source_index(&self, padded: usize, len: usize) -> usize {
        let i = padded as isize - (self.n_fft / 2) as isize;
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * (len - 1) - i as usize
        } else {
            i as usize
        }
    }

    /// Magnitudes laid out `[n_bins × n_frames]`.
    pub fn magnitude(&self, signal: &[f64]) -> Result<Vec<f64>> {
        Ok(self.analyze(signal)?.0)
    }

    /// Magnitudes plus the complex spectra (`[n_frames × n_bins]`) needed by the adjoint.
    pub(crate) fn analyze(&self, signal: &[f64]) -> Result<(Vec<f64>, Vec<Complex<f64>>)> {
        let len = signal.len();
        self.check_len(len)?;
        let frames = self.n_frames(len);
        let bins = self.n_bins();
        let mut mags = vec![0.0; bins * frames];
        let mut spectra = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            for (n, slot) in buf.iter_mut().enumerate() {
                let w = self.window[n];
                let x = if w == 0.0 {
                    0.0
                } else {
                    signal[self.source_index(t * self.hop + n, len)] * w
                };
                *slot = Complex::new(x, 0.0);
            }
            self.forward.process(&mut buf);
            for (k, c) in buf[..bins].iter().enumerate() {
                mags[k * frames + t] = c.norm();
                spectra.push(*c);
            }
        }
        Ok((mags, spectra))
    }

    /// Gradient of `Σ grad_mags · |STFT(x)|` with respect to `x`.
    ///
    /// Bins with zero magnitude contribute nothing (subgradient 0).
    pub(crate) fn backward(
        &self,
        len: usize,
        spectra: &[Complex<f64>],
        grad_mags: &[f64],
    ) -> Vec<f64> {
        let frames = self.n_frames(len);
        let bins = self.n_bins();
        let mut grad = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for k in 0..bins {
                let c = spectra[t * bins + k];
                let mag = c.norm();
                if mag > 0.0 {
                    buf[k] = c * (grad_mags[k * frames + t] / mag);
                }
            }
            // d|X_k|/dx[n] = Re(X_k e^{+iθ}) / |X_k|: an unnormalized inverse DFT
            // of the one-sided weighted spectrum.
            self.inverse.process(&mut buf);
            for n in 0..self.n_fft {
                let w = self.window[n];
                if w != 0.0 {
                    grad[self.source_index(t * self.hop + n, len)] += w * buf[n].re;
                }
            }
        }
        grad
    }
}
