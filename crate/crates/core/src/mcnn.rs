//! Multi-head convolutional spectrogram inverter with a support-mask head.
//!
//! Each head is a stack of bias-free strided 1-D transposed convolutions with
//! ELUs in between, turning `[n_mels, T]` into two channels of length
//! `stride^L · T`: a waveform estimate `s_h` and mask logits `m_h`. Heads are
//! combined as `ŝ* = softsign_a(Σ w_h s_h)` and `M̂ = σ(Σ m_h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::params::he_uniform;
use crate::diff::{Bound, Graph, ParamId, ParamSet, Var};
use crate::dsp::{MelAnalyzer, EPS_LOG};
use crate::error::{NdfError, Result};
use crate::tensor::Tensor;

/// Mask probabilities at or above this value count as support.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McnnConfig {
    pub n_mels: usize,
    pub heads: usize,
    pub layers: usize,
    pub filter: usize,
    pub stride: usize,
    /// Weights of the SC, log-Mel and mask terms.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl McnnConfig {
    pub fn full() -> Self {
        McnnConfig {
            n_mels: 512,
            heads: 8,
            layers: 8,
            filter: 13,
            stride: 2,
            alpha: 3.0,
            beta: 10.0,
            gamma: 1.0,
        }
    }

    pub fn desk() -> Self {
        McnnConfig {
            n_mels: 64,
            heads: 4,
            layers: 4,
            filter: 9,
            ..McnnConfig::full()
        }
    }

    /// Output channels of each layer, input side first: `2^(L-i)` for the first
    /// `L - 1` layers and 2 (waveform and mask) for the last.
    pub fn channels(&self) -> Vec<usize> {
        (1..=self.layers)
            .map(|i| if i == self.layers { 2 } else { 1 << (self.layers - i) })
            .collect()
    }

    /// Total upsampling factor `stride^L`.
    pub fn upsampling(&self) -> usize {
        self.stride.pow(self.layers as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.heads == 0 || self.layers == 0 || self.filter == 0 {
            return Err(NdfError::Config("MCNN sizes must be positive".into()));
        }
        if self.stride < 2 || self.filter < self.stride {
            return Err(NdfError::Config(format!(
                "stride {} must be at least 2 and at most the filter width {}",
                self.stride, self.filter
            )));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(NdfError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Head {
    kernels: Vec<ParamId>,
    weight: ParamId,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct McnnForward {
    /// `ŝ*`: scaled-softsign head mixture, `[N, L]`.
    pub raw: Var,
    /// `M̂ = σ(Σ m_h)`, `[N, L]`.
    pub mask: Var,
    /// `ŝ = ŝ* · M̂`, `[N, L]`.
    pub waveform: Var,
}

/// Scalar parts of one MCNN loss evaluation, each averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct McnnLoss {
    pub total: Var,
    pub sc: Var,
    pub sc_log: Var,
    pub mask_bce: Var,
}

/// Generation-time output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct McnnOutput {
    /// `ŝ* · binarize(M̂)`, row-major `[N, L]`.
    pub waveform: Vec<f64>,
    /// `M̂` before binarization.
    pub mask: Vec<f64>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct McnnModel {
    config: McnnConfig,
    params: ParamSet,
    heads: Vec<Head>,
    softsign_scale: ParamId,
}

impl McnnModel {
    pub fn new(config: McnnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let channels = config.channels();
        let taps_per_output = config.filter.div_ceil(config.stride);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let mut c_in = config.n_mels;
            let mut kernels = Vec::with_capacity(config.layers);
            for (l, &c_out) in channels.iter().enumerate() {
                let kernel =
                    he_uniform(&[c_in, c_out, config.filter], c_in * taps_per_output, rng);
                kernels.push(params.push(format!("head{h}.layer{l}.kernel"), kernel));
                c_in = c_out;
            }
            let weight =
                params.push(format!("head{h}.weight"), Tensor::scalar(1.0 / config.heads as f64));
            heads.push(Head { kernels, weight });
        }
        let softsign_scale = params.push("softsign_scale", Tensor::scalar(1.0));
        Ok(McnnModel {
            config,
            params,
            heads,
            softsign_scale,
        })
    }

    pub fn config(&self) -> &McnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        if !same {
            return Err(NdfError::Checkpoint("MCNN state does not match configuration".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Output waveform length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.config.upsampling() * frames
    }

    /// Forward pass on Mel magnitudes `[N, n_mels, T]`.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, mel: Var) -> Result<McnnForward> {
        let cfg = &self.config;
        let s = g.shape(mel).to_vec();
        if s.len() != 3 || s[1] != cfg.n_mels {
            return Err(NdfError::Dimension(format!(
                "MCNN expects [N, {}, T], got {s:?}",
                cfg.n_mels
            )));
        }
        let frames = s[2];
        let mut wave_sum: Option<Var> = None;
        let mut mask_sum: Option<Var> = None;
        for head in &self.heads {
            let mut h = mel;
            let mut len = frames;
            for (l, &k) in head.kernels.iter().enumerate() {
                len *= cfg.stride;
                h = g.conv_transpose1d(h, b.var(k), cfg.stride, len)?;
                if l + 1 < head.kernels.len() {
                    h = g.elu(h);
                }
            }
            let s_h = g.select_channel(h, 0)?;
            let m_h = g.select_channel(h, 1)?;
            let weighted = g.scale_by(s_h, b.var(head.weight))?;
            wave_sum = Some(match wave_sum {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
            mask_sum = Some(match mask_sum {
                None => m_h,
                Some(acc) => g.add(acc, m_h)?,
            });
        }
        let raw = g.scaled_softsign(wave_sum.expect("heads > 0"), b.var(self.softsign_scale))?;
        let mask = g.sigmoid(mask_sum.expect("heads > 0"));
        let waveform = g.mul(raw, mask)?;
        Ok(McnnForward {
            raw,
            mask,
            waveform,
        })
    }

    /// `α·SC + β·SC_log + γ·BCE` against target waveforms `target: [N, L]` and
    /// support masks `mask: [N, L]` (0/1 entries).
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        mel: Var,
        target: &Tensor,
        mask: &[f64],
        analyzer: &MelAnalyzer,
    ) -> Result<(McnnForward, McnnLoss)> {
        let fwd = self.forward_graph(g, b, mel)?;
        if g.shape(fwd.waveform) != target.shape() {
            return Err(NdfError::Dimension(format!(
                "output {:?} vs target {:?}",
                g.shape(fwd.waveform),
                target.shape()
            )));
        }
        let (sc, sc_log) = spectral_losses(g, fwd.waveform, target, analyzer)?;
        let mask_bce = g.bce(fwd.mask, mask)?;
        let cfg = &self.config;
        let a = g.mul_scalar(sc, cfg.alpha);
        let bl = g.mul_scalar(sc_log, cfg.beta);
        let c = g.mul_scalar(mask_bce, cfg.gamma);
        let ab = g.add(a, bl)?;
        let total = g.add(ab, c)?;
        Ok((
            fwd,
            McnnLoss {
                total,
                sc,
                sc_log,
                mask_bce,
            },
        ))
    }

    /// Generation: `ŝ* · binarize(M̂)` on Mel magnitudes `[N, n_mels, T]`.
    pub fn generate(&self, mel: &Tensor) -> Result<McnnOutput> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let m = g.constant(mel.clone());
        let fwd = self.forward_graph(&mut g, &b, m)?;
        let raw = g.value(fwd.raw).data();
        let mask = g.value(fwd.mask).data().to_vec();
        let waveform = raw
            .iter()
            .zip(binarize_mask(&mask))
            .map(|(&s, keep)| if keep { s } else { 0.0 })
            .collect();
        Ok(McnnOutput {
            waveform,
            mask,
            len: *g.shape(fwd.raw).last().expect("rank 2"),
        })
    }
}

/// Threshold at [`MASK_THRESHOLD`]; exactly 0.5 counts as support.
pub fn binarize_mask(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&m| m >= MASK_THRESHOLD).collect()
}

/// Batch means of the spectral convergence and the log-Mel L1 ratio between
/// `target` (constant, `[N, L]`) and `estimate`.
///
/// Errors if any target is silent, where both ratios are undefined.
pub fn spectral_losses(
    g: &mut Graph,
    estimate: Var,
    target: &Tensor,
    analyzer: &MelAnalyzer,
) -> Result<(Var, Var)> {
    let s = target.shape();
    if s.len() != 2 {
        return Err(NdfError::Dimension(format!("targets must be [N, L], got {s:?}")));
    }
    let n = s[0];
    let mut target_mel = Vec::new();
    let mut fro = Vec::with_capacity(n);
    let mut l1 = Vec::with_capacity(n);
    for i in 0..n {
        let mel = analyzer.mel(target.outer(i))?;
        let norm = mel.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(NdfError::DegenerateInput(format!("target {i} is silent")));
        }
        fro.push(norm);
        l1.push(mel.iter().map(|v| (v + EPS_LOG).ln().abs()).sum::<f64>());
        target_mel.extend(mel);
    }
    let frames = analyzer.plan.n_frames(s[1]);
    let shape = [n, analyzer.bank.n_mels(), frames];
    let log_target: Vec<f64> = target_mel.iter().map(|v| (v + EPS_LOG).ln()).collect();
    let target_mel = g.constant(Tensor::new(&shape, target_mel)?);
    let log_target = g.constant(Tensor::new(&shape, log_target)?);

    let stft = g.stft_magnitude(estimate, &analyzer.plan)?;
    let est_mel = g.mel_project(stft, &analyzer.bank)?;

    let diff = g.sub(target_mel, est_mel)?;
    let sq = g.square(diff);
    let per = g.sum_per_sample(sq);
    let num = g.sqrt(per)?;
    let sc = g.weighted_sum(num, fro.iter().map(|f| 1.0 / (f * n as f64)).collect())?;

    let shifted = g.add_scalar(est_mel, EPS_LOG);
    let log_est = g.log(shifted)?;
    let ldiff = g.sub(log_target, log_est)?;
    let labs = g.abs(ldiff);
    let lper = g.sum_per_sample(labs);
    let sc_log = g.weighted_sum(lper, l1.iter().map(|d| 1.0 / (d * n as f64)).collect())?;
    Ok((sc, sc_log))
}
