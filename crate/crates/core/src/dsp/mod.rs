//! Audio I/O, preprocessing, STFT, Mel projection and log-scaling.

mod mel;
mod preprocess;
mod scaling;
mod stft;
mod wav;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use preprocess::{preprocess, AudioClip, SupportMask};
pub use scaling::{ScalingStats, EPS_LOG, STD_FLOOR};
pub use stft::{hann, StftPlan};
pub use wav::{load_wav, save_wav, MAX_WAV_SAMPLES};

use crate::error::Result;

/// Sample rate of every clip handled by the system.
pub const SAMPLE_RATE: u32 = 22050;

/// Signal-chain geometry shared by every component of one profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Canonical padded waveform length, a multiple of `hop`.
    pub canonical_len: usize,
}

impl DspConfig {
    pub fn full() -> Self {
        DspConfig {
            sample_rate: SAMPLE_RATE,
            n_fft: 2048,
            win_len: 1024,
            hop: 256,
            n_mels: 512,
            canonical_len: 22016,
        }
    }

    pub fn desk() -> Self {
        DspConfig {
            sample_rate: SAMPLE_RATE,
            n_fft: 128,
            win_len: 64,
            hop: 16,
            n_mels: 64,
            canonical_len: 256,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self) -> usize {
        self.canonical_len / self.hop
    }

    pub fn analyzer(&self) -> Result<MelAnalyzer> {
        let plan = StftPlan::new(self.n_fft, self.win_len, self.hop)?;
        let bank = MelFilterbank::new(plan.n_bins(), self.n_mels, self.sample_rate)?;
        Ok(MelAnalyzer {
            plan: Arc::new(plan),
            bank: Arc::new(bank),
        })
    }
}

/// A shared STFT plan and filterbank: waveform → Mel magnitudes.
#[derive(Debug, Clone)]
pub struct MelAnalyzer {
    pub plan: Arc<StftPlan>,
    pub bank: Arc<MelFilterbank>,
}

impl MelAnalyzer {
    /// Mel magnitudes `[n_mels × frames]` of `signal`.
    pub fn mel(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let stft = self.plan.magnitude(signal)?;
        self.bank.project(&stft, self.plan.n_frames(signal.len()))
    }
}
