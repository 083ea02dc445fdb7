//! 16-bit PCM mono WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{NdfError, Result};

use super::preprocess::AudioClip;
use super::SAMPLE_RATE;

/// Longest accepted file: one second at the system rate.
pub const MAX_WAV_SAMPLES: usize = SAMPLE_RATE as usize;

const SCALE: f64 = 32768.0;

/// Reads a mono 16-bit PCM file at 22050 Hz. Samples are scaled to `[-1, 1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(NdfError::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(NdfError::Format(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(NdfError::Format(format!(
            "{}: {}-bit {:?} samples, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let len = reader.len() as usize;
    if len > MAX_WAV_SAMPLES {
        return Err(NdfError::Format(format!(
            "{}: {len} samples is longer than one second",
            path.display()
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AudioClip::new(samples))
}

/// Writes `samples` as mono 16-bit PCM at 22050 Hz, rounding to the nearest
/// quantization step and clamping to the representable range.
pub fn save_wav(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &x in samples {
        let q = (x * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64);
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
