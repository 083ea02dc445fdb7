//! Oracles and check batteries shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use ndf_core::cwae::sample_class_priors;
use ndf_core::diff::{grad_check, grad_check_sampled, Bound, BnMode, GradCheckReport, Graph, Var};
use ndf_core::dsp::{MelFilterbank, StftPlan};
use ndf_core::training::{
    gen_synthetic_corpus, train_cwae, train_mcnn, CwaeTrainConfig, McnnTrainConfig, PreparedData, Split,
    TrainReport,
};
use ndf_core::{CwaeModel, McnnModel, NdfError, Profile, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Res<T> = Result<T, NdfError>;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn gaussian_rows(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + shift)
                .collect()
        })
        .collect()
}

pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
}

/// Direct double-loop MMD² U-statistic with the inverse-multiquadratics kernel.
pub fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], scale: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let mut d2 = 0.0;
        for i in 0..a.len() {
            d2 += (a[i] - b[i]) * (a[i] - b[i]);
        }
        scale / (scale + d2)
    };
    let n = x.len() as f64;
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += k(&x[i], &x[j]);
                yy += k(&y[i], &y[j]);
            }
            xy += k(&x[i], &y[j]);
        }
    }
    xx / (n * (n - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (n * n)
}

/// Triangular Mel filters rebuilt from the Mel-scale formula, one filter at a
/// time: edges evenly spaced in Mel from 0 Hz to Nyquist, each filter at least
/// one bin wide on either side, unit area.
pub fn oracle_filter(n_bins: usize, n_mels: usize, sample_rate: f64, m: usize) -> Vec<f64> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let nyquist = sample_rate / 2.0;
    let edge = |i: usize| to_hz(to_mel(nyquist) * i as f64 / (n_mels + 1) as f64) / nyquist * (n_bins - 1) as f64;
    let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
    let (lw, rw) = ((c - l).max(1.0), (r - c).max(1.0));
    let mut w: Vec<f64> = (0..n_bins)
        .map(|b| {
            let x = b as f64;
            let v = if x <= c { 1.0 - (c - x) / lw } else { 1.0 - (x - c) / rw };
            v.max(0.0)
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Per-filter Mel projection of `stft` (`[n_bins × frames]`).
pub fn oracle_mel(stft: &[f64], n_bins: usize, n_mels: usize, frames: usize, sample_rate: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_mels * frames];
    for m in 0..n_mels {
        let filter = oracle_filter(n_bins, n_mels, sample_rate, m);
        for t in 0..frames {
            out[m * frames + t] = (0..n_bins).map(|b| filter[b] * stft[b * frames + t]).sum();
        }
    }
    out
}

/// Reduces a node to a scalar through fixed random weights, so every output
/// element carries a distinct upstream gradient.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Res<Var> {
    let mut r = rng(seed);
    let n = g.value(v).numel();
    g.weighted_sum(v, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn sum_projections(g: &mut Graph, terms: &[Var], seed: u64) -> Res<Var> {
    let mut acc = project(g, terms[0], seed)?;
    for (k, &t) in terms.iter().enumerate().skip(1) {
        let p = project(g, t, seed + k as u64)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Finite-difference checks of every differentiable graph operator.
pub fn operator_grad_checks() -> Res<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng(100);
    let mut out = Vec::new();

    let a = uniform(&[2, 5], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 5], -1.0, 1.0, &mut r);
    let p = uniform(&[2, 5], 0.2, 2.0, &mut r);
    let s = Tensor::scalar(1.3);
    out.push((
        "elementwise (add sub mul relu elu sigmoid log sqrt abs square scale softsign)",
        grad_check(&[a, b, p, s], |g, v| {
            let sum = g.add(v[0], v[1])?;
            let diff = g.sub(sum, v[1])?;
            let prod = g.mul(diff, v[1])?;
            let relu = g.relu(prod);
            let elu = g.elu(v[0]);
            let sig = g.sigmoid(v[1]);
            let sig = g.add_scalar(sig, 0.5);
            let log = g.log(v[2])?;
            let log = g.mul_scalar(log, -2.0);
            let sqrt = g.sqrt(v[2])?;
            let abs = g.abs(v[0]);
            let sq = g.square(v[1]);
            let scaled = g.scale_by(elu, v[3])?;
            let soft = g.scaled_softsign(v[1], v[3])?;
            sum_projections(g, &[relu, scaled, sig, log, sqrt, abs, sq, soft], 1)
        })?,
    ));

    let x = uniform(&[4, 2, 3], -1.0, 1.0, &mut r);
    let y = uniform(&[4, 5], -1.0, 1.0, &mut r);
    out.push((
        "reductions and indexing (sum mean per-sample reshape concat select)",
        grad_check(&[x, y], |g, v| {
            let total = g.sum(v[0]);
            let per = g.sum_per_sample(v[0]);
            let mean = g.mean(v[0]);
            let rows = g.select_rows(v[0], &[3, 0, 3])?;
            let ch = g.select_channel(v[0], 1)?;
            let flat = g.reshape(v[0], &[4, 6])?;
            let cat = g.concat_cols(flat, v[1])?;
            sum_projections(g, &[total, per, mean, rows, ch, cat], 10)
        })?,
    ));

    let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let bias = uniform(&[5], -1.0, 1.0, &mut r);
    out.push((
        "linear",
        grad_check(&[x, w, bias], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 20)
        })?,
    ));

    let x = uniform(&[2, 2, 7, 6], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 5, 3], -1.0, 1.0, &mut r);
    let bias = uniform(&[3], -1.0, 1.0, &mut r);
    out.push((
        "conv2d",
        grad_check(&[x, k, bias], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (3, 2), (2, 1))?;
            project(g, y, 21)
        })?,
    ));

    let x = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 5, 3], -1.0, 1.0, &mut r);
    let bias = uniform(&[2], -1.0, 1.0, &mut r);
    out.push((
        "conv_transpose2d",
        grad_check(&[x, k, bias], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), (3, 2), (2, 1), (9, 8))?;
            project(g, y, 22)
        })?,
    ));

    let x = uniform(&[2, 3, 5], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 9], -1.0, 1.0, &mut r);
    out.push((
        "conv_transpose1d",
        grad_check(&[x, k], |g, v| {
            let y = g.conv_transpose1d(v[0], v[1], 2, 10)?;
            project(g, y, 23)
        })?,
    ));

    let x = uniform(&[4, 3, 2, 2], -1.0, 1.0, &mut r);
    let gamma = uniform(&[2, 3], 0.5, 1.5, &mut r);
    let beta = uniform(&[2, 3], -0.5, 0.5, &mut r);
    let labels = [0, 1, 1, 0];
    out.push((
        "conditional batch norm (batch statistics)",
        grad_check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let (y, _) = g.cond_batch_norm(v[0], v[1], v[2], &labels, BnMode::Batch { eps: 1e-5 })?;
            project(g, y, 24)
        })?,
    ));
    let (mean, var) = ([0.1, 0.0, -0.3], [0.5, 1.0, 2.0]);
    out.push((
        "conditional batch norm (running statistics)",
        grad_check(&[x, gamma, beta], |g, v| {
            let mode = BnMode::Running {
                mean: &mean,
                var: &var,
                eps: 1e-5,
            };
            let (y, _) = g.cond_batch_norm(v[0], v[1], v[2], &labels, mode)?;
            project(g, y, 25)
        })?,
    ));

    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 4], -1.0, 1.0, &mut r);
    out.push((
        "imq kernel",
        grad_check(&[a, b], |g, v| {
            let k = g.imq_kernel(v[0], v[1], 8.0)?;
            let kk = g.imq_kernel(v[0], v[0], 8.0)?;
            sum_projections(g, &[k, kk], 26)
        })?,
    ));

    let plan = Arc::new(StftPlan::new(32, 16, 8)?);
    let bank = Arc::new(MelFilterbank::new(plan.n_bins(), 6, 22050)?);
    let x = uniform(&[2, 48], -1.0, 1.0, &mut r);
    out.push((
        "stft magnitude + mel projection",
        grad_check(&[x], |g, v| {
            let s = g.stft_magnitude(v[0], &plan)?;
            let m = g.mel_project(s, &bank)?;
            project(g, m, 28)
        })?,
    ));

    let probs = uniform(&[16], 0.05, 0.95, &mut r);
    let target: Vec<f64> = (0..16).map(|i| if i < 9 { 1.0 } else { 0.0 }).collect();
    out.push(("binary cross-entropy", grad_check(&[probs], |g, v| g.bce(v[0], &target))?));
    Ok(out)
}

/// Entries checked per parameter tensor in the full-loss checks.
pub const FULL_LOSS_SAMPLES: usize = 6;

/// Finite-difference check of the complete CWAE objective (reconstruction plus
/// weighted per-class MMD, batch norm in training mode) at desk shapes, over
/// every parameter tensor and the input.
pub fn cwae_full_loss_check(seed: u64) -> Res<GradCheckReport> {
    let mut r = rng(seed);
    let model = CwaeModel::new(Profile::Desk.cwae(2), &mut r)?;
    let cfg = model.config().clone();
    let labels = [0, 1, 0, 1];
    let x = uniform(&[4, cfg.n_mels, cfg.n_frames], -1.5, 1.5, &mut r);
    let priors = sample_class_priors(&mut r, &labels, cfg.n_classes, cfg.d_z)?;
    let mut tensors: Vec<Tensor> = model.params().tensors().to_vec();
    tensors.push(x);
    let n_params = model.params().len();
    grad_check_sampled(&tensors, FULL_LOSS_SAMPLES, seed, |g, v| {
        let b = Bound::from_vars(v[..n_params].to_vec());
        let loss = model.loss_graph(g, &b, v[n_params], &labels, &priors, &mut Vec::new())?;
        Ok(loss.total)
    })
}

/// Finite-difference check of the complete MCNN objective (SC, SC_log and mask
/// BCE) at desk shapes, over every parameter tensor.
pub fn mcnn_full_loss_check(seed: u64) -> Res<GradCheckReport> {
    let dsp = Profile::Desk.dsp();
    let analyzer = dsp.analyzer()?;
    let corpus = gen_synthetic_corpus(2, dsp.canonical_len, seed)?;
    let data = PreparedData::new(&corpus, dsp)?;
    let idx = [0, 2, 4];
    let mel = data.mel_batch(&idx)?;
    let target = data.wave_batch(&idx)?;
    let mask = data.mask_batch(&idx);
    let mut r = rng(seed);
    let model = McnnModel::new(Profile::Desk.mcnn(), &mut r)?;
    grad_check_sampled(model.params().tensors(), FULL_LOSS_SAMPLES, seed, |g, v| {
        let b = Bound::from_vars(v.to_vec());
        let m = g.constant(mel.clone());
        let (_, loss) = model.loss_graph(g, &b, m, &target, &mask, &analyzer)?;
        Ok(loss.total)
    })
}

pub fn describe(r: &GradCheckReport) -> String {
    format!(
        "max rel error {:.2e} over {} entries (worst tensor {} entry {}: analytic {:.6e}, numeric {:.6e})",
        r.max_rel_error, r.checked, r.worst.0, r.worst.1, r.analytic, r.numeric
    )
}

/// Direct-summation STFT magnitudes `[n_bins × frames]`: reflect padding by
/// `n_fft / 2`, periodic Hann window of `win_len` centered in the frame.
pub fn oracle_stft(x: &[f64], n_fft: usize, win_len: usize, hop: usize) -> Vec<f64> {
    let len = x.len() as isize;
    let half = (n_fft / 2) as isize;
    let sample = |i: isize| {
        let j = if i < 0 {
            -i
        } else if i >= len {
            2 * (len - 1) - i
        } else {
            i
        };
        x[j as usize]
    };
    let offset = (n_fft - win_len) / 2;
    let window = |n: usize| {
        if n < offset || n >= offset + win_len {
            0.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n - offset) as f64 / win_len as f64).cos()
        }
    };
    let frames = x.len() / hop;
    let bins = n_fft / 2 + 1;
    let mut out = vec![0.0; bins * frames];
    for t in 0..frames {
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..n_fft {
                let v = window(n) * sample((t * hop + n) as isize - half);
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            out[k * frames + t] = re.hypot(im);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn desk_data(n_per_class: usize, seed: u64) -> Res<PreparedData> {
    let dsp = Profile::Desk.dsp();
    PreparedData::new(&gen_synthetic_corpus(n_per_class, dsp.canonical_len, seed)?, dsp)
}

/// Trains both desk models for `iterations` steps each and fits the control
/// basis on the training codes.
pub fn desk_checkpoint(
    data: &PreparedData,
    iterations: usize,
    seed: u64,
) -> Res<(ndf_core::Checkpoint, TrainReport, TrainReport)> {
    let profile = Profile::Desk;
    let mut r = rng(seed);
    let mut cwae = CwaeModel::new(profile.cwae(data.n_classes), &mut r)?;
    let mut mcnn = McnnModel::new(profile.mcnn(), &mut r)?;
    let cwae_cfg = CwaeTrainConfig {
        iterations,
        ..profile.cwae_training()
    };
    let mcnn_cfg = McnnTrainConfig {
        iterations,
        ..profile.mcnn_training()
    };
    let cwae_report = train_cwae(&mut cwae, data, &cwae_cfg, seed)?;
    let mcnn_report = train_mcnn(&mut mcnn, data, &mcnn_cfg, seed)?;
    let idx = data.indices(Split::Train);
    let z = cwae.encode(&data.scaled_batch(&idx)?, &data.labels_of(&idx))?;
    let codes: Vec<Vec<f64>> = (0..idx.len()).map(|i| z.outer(i).to_vec()).collect();
    let mut ck = ndf_core::Checkpoint::new(profile);
    ck.pca = Some(ndf_core::fit_pca(&codes, ndf_core::N_CONTROLS)?);
    ck.stats = Some(data.stats.clone());
    ck.cwae = Some(cwae);
    ck.mcnn = Some(mcnn);
    Ok((ck, cwae_report, mcnn_report))
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
