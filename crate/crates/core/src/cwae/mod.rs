//! Conditional Wasserstein autoencoder over standardized log-Mel spectrograms.
//!
//! Encoder: three `conv2d → conditional BN → ReLU` blocks, then a fully
//! connected stack down to `d_z`. Decoder: the mirror image, fed with the code
//! concatenated to a one-hot class vector, ending in a biased transposed
//! convolution back to the input shape.

mod mmd;

pub use mmd::{
    class_rows, imq, mmd_u_statistic, mmd_u_statistic_graph, per_class_regularizer,
    sample_class_priors,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::params::{he_uniform, scaled_uniform};
use crate::diff::{conv_out_len, BatchStats, BnMode, Bound, Graph, ParamId, ParamSet, Var};
use crate::error::{NdfError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwaeConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub n_classes: usize,
    pub d_z: usize,
    /// Output channels of the three encoder convolutions.
    pub channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    /// Hidden sizes of the encoder FC stack, before the final `d_z` layer.
    pub fc_hidden: Vec<usize>,
    /// Weight of the latent regularizer.
    pub beta: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl CwaeConfig {
    pub fn full(n_classes: usize) -> Self {
        CwaeConfig {
            n_mels: 512,
            n_frames: 86,
            n_classes,
            d_z: 64,
            channels: vec![16, 32, 64],
            kernel: (11, 5),
            stride: (3, 2),
            pad: (5, 2),
            fc_hidden: vec![1024, 512],
            beta: 10.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn desk(n_classes: usize) -> Self {
        CwaeConfig {
            n_mels: 64,
            n_frames: 16,
            d_z: 16,
            channels: vec![8, 16, 32],
            fc_hidden: vec![128, 64],
            ..CwaeConfig::full(n_classes)
        }
    }

    /// Inverse-multiquadratics constant `2 · d_z · σ²` with `σ² = 1`.
    pub fn kernel_scale(&self) -> f64 {
        2.0 * self.d_z as f64
    }

    /// Spatial size `(H, W)` before the first and after every convolution.
    pub fn spatial_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut chain = vec![(self.n_mels, self.n_frames)];
        for _ in &self.channels {
            let (h, w) = *chain.last().expect("non-empty");
            match (
                conv_out_len(h, self.kernel.0, self.stride.0, self.pad.0),
                conv_out_len(w, self.kernel.1, self.stride.1, self.pad.1),
            ) {
                (Some(h), Some(w)) => chain.push((h, w)),
                _ => {
                    return Err(NdfError::Config(format!(
                        "input {}×{} too small for {} convolutions",
                        self.n_mels,
                        self.n_frames,
                        self.channels.len()
                    )))
                }
            }
        }
        Ok(chain)
    }

    /// Length of the flattened convolutional feature map.
    pub fn flat_len(&self) -> Result<usize> {
        let (h, w) = *self.spatial_chain()?.last().expect("non-empty");
        Ok(self.channels.last().copied().unwrap_or(1) * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NdfError::Config(msg.into()));
        if self.n_classes == 0 || self.d_z == 0 || self.channels.is_empty() {
            return bad("classes, latent size and channel list must be non-empty");
        }
        if self.channels.contains(&0) || self.fc_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(self.beta > 0.0) || !(self.bn_eps > 0.0) {
            return bad("beta and batch-norm eps must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("batch-norm momentum must lie in (0, 1]");
        }
        self.spatial_chain().map(|_| ())
    }
}

/// Running estimates of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_conv: Vec<ConvBlock>,
    enc_fc: Vec<Dense>,
    dec_fc: Vec<Dense>,
    dec_conv: Vec<ConvBlock>,
    out_kernel: ParamId,
    out_bias: ParamId,
}

/// Whether batch norm uses batch statistics (training) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Scalar parts of one CWAE loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CwaeLoss {
    pub total: Var,
    /// Sum over the batch of per-sample mean squared reconstruction errors.
    pub mse_sum: Var,
    pub regularizer: Var,
}

#[derive(Debug, Clone)]
pub struct CwaeModel {
    config: CwaeConfig,
    params: ParamSet,
    layout: Layout,
    /// Encoder layers first, then decoder layers.
    running: Vec<RunningStats>,
}

fn bn_params(
    params: &mut ParamSet,
    prefix: &str,
    n_classes: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    // A small class-dependent perturbation so conditioning matters from the start.
    let gamma = scaled_uniform(&[n_classes, channels], 0.05, rng).map(|v| 1.0 + v);
    let beta = scaled_uniform(&[n_classes, channels], 0.05, rng);
    (
        params.push(format!("{prefix}.gamma"), gamma),
        params.push(format!("{prefix}.beta"), beta),
    )
}

fn dense(params: &mut ParamSet, prefix: &str, fan_in: usize, out: usize, rng: &mut impl Rng) -> Dense {
    Dense {
        w: params.push(format!("{prefix}.w"), he_uniform(&[out, fan_in], fan_in, rng)),
        b: params.push(format!("{prefix}.b"), Tensor::zeros(&[out])),
    }
}

impl CwaeModel {
    pub fn new(config: CwaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (kh, kw) = config.kernel;
        let c = config.n_classes;
        let mut params = ParamSet::new();

        let mut enc_conv = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = c_in * kh * kw;
            let kernel = params.push(
                format!("enc.conv{i}.kernel"),
                he_uniform(&[c_out, c_in, kh, kw], fan_in, rng),
            );
            let (gamma, beta) = bn_params(&mut params, &format!("enc.bn{i}"), c, c_out, rng);
            enc_conv.push(ConvBlock {
                kernel,
                gamma,
                beta,
            });
            c_in = c_out;
        }

        let flat = config.flat_len()?;
        let mut widths = vec![flat];
        widths.extend(&config.fc_hidden);
        widths.push(config.d_z);
        let enc_fc = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(&mut params, &format!("enc.fc{i}"), w[0], w[1], rng))
            .collect();

        let mut dec_widths = vec![config.d_z + c];
        dec_widths.extend(config.fc_hidden.iter().rev());
        dec_widths.push(flat);
        let dec_fc = dec_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(&mut params, &format!("dec.fc{i}"), w[0], w[1], rng))
            .collect();

        // Transposed convolutions from the deepest feature map back up; all but
        // the last are followed by batch norm.
        let mut dec_conv = Vec::new();
        let rev: Vec<usize> = config.channels.iter().rev().copied().collect();
        for (i, pair) in rev.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            let kernel = params.push(
                format!("dec.convt{i}.kernel"),
                he_uniform(&[ci, co, kh, kw], ci * kh * kw, rng),
            );
            let (gamma, beta) = bn_params(&mut params, &format!("dec.bn{i}"), c, co, rng);
            dec_conv.push(ConvBlock {
                kernel,
                gamma,
                beta,
            });
        }
        let c_last = config.channels[0];
        let out_kernel = params.push(
            "dec.out.kernel",
            he_uniform(&[c_last, 1, kh, kw], c_last * kh * kw, rng),
        );
        let out_bias = params.push("dec.out.bias", Tensor::zeros(&[1]));

        let running = config
            .channels
            .iter()
            .chain(rev.iter().skip(1))
            .map(|&ch| RunningStats::new(ch))
            .collect();
        Ok(CwaeModel {
            config,
            params,
            layout: Layout {
                enc_conv,
                enc_fc,
                dec_fc,
                dec_conv,
                out_kernel,
                out_bias,
            },
            running,
        })
    }

    pub fn config(&self) -> &CwaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Replaces parameters and running statistics, e.g. from a checkpoint.
    /// Shapes must match the current layout.
    pub fn load_state(&mut self, params: ParamSet, running: Vec<RunningStats>) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        let running_ok = running.len() == self.running.len()
            && running
                .iter()
                .zip(&self.running)
                .all(|(a, b)| a.mean.len() == b.mean.len() && a.var.len() == b.var.len());
        if !same || !running_ok {
            return Err(NdfError::Checkpoint("CWAE state does not match configuration".into()));
        }
        self.params = params;
        self.running = running;
        Ok(())
    }

    /// Folds training-batch statistics (in layer order) into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        debug_assert_eq!(stats.len(), self.running.len());
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, m);
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.config.n_classes) {
            Some(&label) => Err(NdfError::Label {
                label,
                n_classes: self.config.n_classes,
            }),
            None => Ok(()),
        }
    }

    fn bn(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        block: &ConvBlock,
        layer: usize,
        labels: &[usize],
        phase: Phase,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let eps = self.config.bn_eps;
        let r = &self.running[layer];
        let mode = match phase {
            Phase::Train => BnMode::Batch { eps },
            Phase::Eval => BnMode::Running {
                mean: &r.mean,
                var: &r.var,
                eps,
            },
        };
        let (y, s) = g.cond_batch_norm(x, b.var(block.gamma), b.var(block.beta), labels, mode)?;
        stats.extend(s);
        Ok(g.relu(y))
    }

    /// Encodes `x: [N, n_mels, n_frames]` to codes `[N, d_z]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        labels: &[usize],
        phase: Phase,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != cfg.n_mels || s[2] != cfg.n_frames || s[0] != labels.len() {
            return Err(NdfError::Dimension(format!(
                "encoder expects [{}, {}, {}], got {s:?}",
                labels.len(),
                cfg.n_mels,
                cfg.n_frames
            )));
        }
        self.check_labels(labels)?;
        let n = s[0];
        let mut h = g.reshape(x, &[n, 1, cfg.n_mels, cfg.n_frames])?;
        for (i, block) in self.layout.enc_conv.iter().enumerate() {
            h = g.conv2d(h, b.var(block.kernel), None, cfg.stride, cfg.pad)?;
            h = self.bn(g, b, h, block, i, labels, phase, stats)?;
        }
        h = g.reshape(h, &[n, cfg.flat_len()?])?;
        let last = self.layout.enc_fc.len() - 1;
        for (i, d) in self.layout.enc_fc.iter().enumerate() {
            h = g.linear(h, b.var(d.w), Some(b.var(d.b)))?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Decodes codes `z: [N, d_z]` to spectrograms `[N, n_mels, n_frames]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: Var,
        labels: &[usize],
        phase: Phase,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != cfg.d_z || s[0] != labels.len() {
            return Err(NdfError::Dimension(format!(
                "decoder expects [{}, {}], got {s:?}",
                labels.len(),
                cfg.d_z
            )));
        }
        self.check_labels(labels)?;
        let n = s[0];
        let c = cfg.n_classes;
        let mut one_hot = vec![0.0; n * c];
        for (i, &l) in labels.iter().enumerate() {
            one_hot[i * c + l] = 1.0;
        }
        let cond = g.constant(Tensor::new(&[n, c], one_hot)?);
        let mut h = g.concat_cols(z, cond)?;
        for d in &self.layout.dec_fc {
            h = g.linear(h, b.var(d.w), Some(b.var(d.b)))?;
            h = g.relu(h);
        }
        let chain = cfg.spatial_chain()?;
        let depth = chain.len() - 1;
        let (h_deep, w_deep) = chain[depth];
        h = g.reshape(h, &[n, *cfg.channels.last().expect("non-empty"), h_deep, w_deep])?;
        let n_enc = self.layout.enc_conv.len();
        for (i, block) in self.layout.dec_conv.iter().enumerate() {
            let target = chain[depth - 1 - i];
            h = g.conv_transpose2d(h, b.var(block.kernel), None, cfg.stride, cfg.pad, target)?;
            h = self.bn(g, b, h, block, n_enc + i, labels, phase, stats)?;
        }
        h = g.conv_transpose2d(
            h,
            b.var(self.layout.out_kernel),
            Some(b.var(self.layout.out_bias)),
            cfg.stride,
            cfg.pad,
            chain[0],
        )?;
        g.reshape(h, &[n, cfg.n_mels, cfg.n_frames])
    }

    /// Training objective: `Σ_i MSE(x_i, x̂_i) + β · D_Z`, with batch-norm in
    /// training mode. `priors[c]` holds the prior samples for class `c`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        labels: &[usize],
        priors: &[Tensor],
        stats: &mut Vec<BatchStats>,
    ) -> Result<CwaeLoss> {
        let z = self.encode_graph(g, b, x, labels, Phase::Train, stats)?;
        let x_hat = self.decode_graph(g, b, z, labels, Phase::Train, stats)?;
        let mse_sum = reconstruction_mse_sum(g, x, x_hat)?;
        let regularizer = per_class_regularizer(g, z, labels, priors, self.config.kernel_scale())?;
        let weighted = g.mul_scalar(regularizer, self.config.beta);
        let total = g.add(mse_sum, weighted)?;
        Ok(CwaeLoss {
            total,
            mse_sum,
            regularizer,
        })
    }

    /// Inference encode with running batch-norm statistics.
    pub fn encode(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &b, xv, labels, Phase::Eval, &mut Vec::new())?;
        Ok(g.value(z).clone())
    }

    /// Inference decode with running batch-norm statistics.
    pub fn decode(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, &b, zv, labels, Phase::Eval, &mut Vec::new())?;
        Ok(g.value(x).clone())
    }

    /// Inference reconstruction `decode(encode(x))`.
    pub fn reconstruct(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let z = self.encode(x, labels)?;
        self.decode(&z, labels)
    }
}

/// `Σ_i mean_e (x_i − x̂_i)²` over a batch of equally shaped samples.
pub fn reconstruction_mse_sum(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let per_sample = g.value(x).numel() / g.shape(x)[0];
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.mul_scalar(total, 1.0 / per_sample as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn full_profile_shape_chain() {
        let cfg = CwaeConfig::full(11);
        assert_eq!(
            cfg.spatial_chain().unwrap(),
            vec![(512, 86), (171, 43), (57, 22), (19, 11)]
        );
        assert_eq!(cfg.flat_len().unwrap(), 64 * 19 * 11);
        assert_eq!(cfg.kernel_scale(), 128.0);
    }

    #[test]
    fn desk_profile_shape_chain() {
        let cfg = CwaeConfig::desk(3);
        assert_eq!(cfg.spatial_chain().unwrap(), vec![(64, 16), (22, 8), (8, 4), (3, 2)]);
        assert_eq!(cfg.flat_len().unwrap(), 192);
    }

    #[test]
    fn desk_round_trip_shape_and_zero_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CwaeModel::new(CwaeConfig::desk(3), &mut rng).unwrap();
        let x = scaled_uniform(&[2, 64, 16], 1.0, &mut rng);
        let z = model.encode(&x, &[0, 2]).unwrap();
        assert_eq!(z.shape(), &[2, 16]);
        let y = model.decode(&z, &[0, 2]).unwrap();
        assert_eq!(y.shape(), x.shape());
        let y0 = model.decode(&Tensor::zeros(&[1, 16]), &[1]).unwrap();
        assert!(y0.is_finite());
    }

    #[test]
    fn class_changes_the_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = CwaeModel::new(CwaeConfig::desk(3), &mut rng).unwrap();
        let x = scaled_uniform(&[1, 64, 16], 1.0, &mut rng);
        let a = model.encode(&x, &[0]).unwrap();
        let b = model.encode(&x, &[1]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bad_labels_and_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = CwaeModel::new(CwaeConfig::desk(3), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 64, 16]);
        assert!(matches!(model.encode(&x, &[3]), Err(NdfError::Label { .. })));
        assert!(model.encode(&Tensor::zeros(&[1, 64, 15]), &[0]).is_err());
        assert!(model.decode(&Tensor::zeros(&[1, 15]), &[0]).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = RunningStats::new(1);
        r.update(
            &BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
            0.1,
        );
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }
}
