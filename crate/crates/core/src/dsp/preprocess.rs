//! Peak normalization, zero padding and the support mask.

use crate::error::{NdfError, Result};

use super::SAMPLE_RATE;

/// A mono clip at the system sample rate. `original_len` counts the samples
/// before padding; everything past it is expected to be zero once preprocessed.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    original_len: usize,
}

impl AudioClip {
    /// An unpadded clip: every sample is part of the original support.
    pub fn new(samples: Vec<f64>) -> Self {
        let original_len = samples.len();
        AudioClip {
            samples,
            original_len,
        }
    }

    /// A clip whose support ends at `original_len`.
    pub fn with_support(samples: Vec<f64>, original_len: usize) -> Result<Self> {
        if original_len > samples.len() {
            return Err(NdfError::Dimension(format!(
                "original length {original_len} exceeds clip length {}",
                samples.len()
            )));
        }
        Ok(AudioClip {
            samples,
            original_len,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `bits[i] == 1` exactly for `i < original_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    len: usize,
    original_len: usize,
}

impl SupportMask {
    pub fn new(len: usize, original_len: usize) -> Self {
        assert!(original_len <= len, "support longer than mask");
        SupportMask { len, original_len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ones(&self) -> usize {
        self.original_len
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.original_len
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// Peak-normalizes the original support of `clip` to 1 and zero-pads it to
/// `canonical_len`.
pub fn preprocess(clip: &AudioClip, canonical_len: usize) -> Result<(AudioClip, SupportMask)> {
    let n = clip.original_len;
    if n == 0 || n > canonical_len {
        return Err(NdfError::Dimension(format!(
            "clip of {n} samples does not fit canonical length {canonical_len}"
        )));
    }
    let support = &clip.samples[..n];
    let peak = support.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(NdfError::DegenerateInput("silent clip".into()));
    }
    let mut samples = vec![0.0; canonical_len];
    for (dst, &src) in samples.iter_mut().zip(support) {
        *dst = src / peak;
    }
    Ok((
        AudioClip {
            samples,
            original_len: n,
        },
        SupportMask::new(canonical_len, n),
    ))
}
