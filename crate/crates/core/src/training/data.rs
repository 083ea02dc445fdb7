//! Corpus features computed once before training: Mel spectrograms, scaling
//! statistics (training split only) and batch assembly.

use crate::dsp::{DspConfig, MelAnalyzer, ScalingStats};
use crate::error::{NdfError, Result};
use crate::tensor::Tensor;

use super::corpus::{Corpus, Split};

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dsp: DspConfig,
    pub analyzer: MelAnalyzer,
    pub n_classes: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub waves: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    /// Unscaled Mel magnitudes, `[n_mels × T]` each.
    pub mels: Vec<Vec<f64>>,
    /// Standardized log-Mel spectrograms, `[n_mels × T]` each.
    pub scaled: Vec<Vec<f64>>,
    pub stats: ScalingStats,
}

impl PreparedData {
    pub fn new(corpus: &Corpus, dsp: DspConfig) -> Result<Self> {
        let analyzer = dsp.analyzer()?;
        let mut waves = Vec::with_capacity(corpus.items.len());
        let mut masks = Vec::with_capacity(corpus.items.len());
        let mut mels = Vec::with_capacity(corpus.items.len());
        for item in &corpus.items {
            if item.clip.len() != dsp.canonical_len {
                return Err(NdfError::Corpus(format!(
                    "clip of {} samples in a profile with canonical length {}",
                    item.clip.len(),
                    dsp.canonical_len
                )));
            }
            mels.push(analyzer.mel(item.clip.samples())?);
            waves.push(item.clip.samples().to_vec());
            masks.push(item.mask().to_f64());
        }
        let splits: Vec<Split> = corpus.items.iter().map(|it| it.split).collect();
        let stats = fit_train_stats(&mels, &splits)?;
        let scaled = mels
            .iter()
            .map(|m| stats.log_standardize(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedData {
            dsp,
            analyzer,
            n_classes: corpus.n_classes(),
            labels: corpus.items.iter().map(|it| it.label()).collect(),
            splits,
            waves,
            masks,
            mels,
            scaled,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for i in self.indices(split) {
            out[self.labels[i]].push(i);
        }
        out
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    fn stack(&self, rows: &[Vec<f64>], idx: &[usize], inner: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * inner.iter().product::<usize>());
        for &i in idx {
            data.extend_from_slice(&rows[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(inner);
        Tensor::new(&shape, data)
    }

    /// Standardized log-Mel batch `[n, n_mels, T]`.
    pub fn scaled_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.stack(&self.scaled, idx, &[self.dsp.n_mels, self.dsp.n_frames()])
    }

    /// Unscaled Mel batch `[n, n_mels, T]`.
    pub fn mel_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.stack(&self.mels, idx, &[self.dsp.n_mels, self.dsp.n_frames()])
    }

    /// Waveform batch `[n, L]`.
    pub fn wave_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.stack(&self.waves, idx, &[self.dsp.canonical_len])
    }

    /// Concatenated support masks, row-major `[n, L]`.
    pub fn mask_batch(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.masks[i].iter().copied()).collect()
    }
}

/// Scaling statistics over the training-split spectrograms only.
pub fn fit_train_stats(mels: &[Vec<f64>], splits: &[Split]) -> Result<ScalingStats> {
    ScalingStats::fit(
        mels.iter()
            .zip(splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(m, _)| m.as_slice()),
    )
}
