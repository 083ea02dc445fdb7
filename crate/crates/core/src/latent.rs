//! PCA over latent codes, the three-knob control mapping, prior sampling and
//! end-to-end generation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cwae::CwaeModel;
use crate::dsp::{AudioClip, DspConfig, ScalingStats};
use crate::error::{NdfError, Result};
use crate::mcnn::McnnModel;
use crate::tensor::Tensor;

/// Number of control knobs exposed to the user.
pub const N_CONTROLS: usize = 3;

/// Relative eigenvalue threshold below which a component is considered noise.
const RANK_TOL: f64 = 1e-10;

/// Mean plus ordered orthonormal principal directions of a set of codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// How many leading components carry non-negligible variance.
    pub meaningful: usize,
}

/// Fits a `k`-component PCA to `latents` (`n` rows of dimension `d`) from the
/// eigendecomposition of the sample covariance.
pub fn fit_pca(latents: &[Vec<f64>], k: usize) -> Result<PcaBasis> {
    let n = latents.len();
    let d = latents.first().map_or(0, Vec::len);
    if n <= k || k == 0 || d == 0 || k > d {
        return Err(NdfError::Dimension(format!(
            "PCA of {k} components needs more than {k} codes of dimension at least {k}; got {n}×{d}"
        )));
    }
    if latents.iter().any(|z| z.len() != d) {
        return Err(NdfError::Dimension("codes of unequal dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| latents[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let meaningful = explained_variance
        .iter()
        .filter(|&&v| top > 0.0 && v > RANK_TOL * top)
        .count();
    if meaningful < k {
        log::warn!("PCA: only {meaningful} of {k} components carry variance");
    }
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        meaningful,
    })
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `z` along every component.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(NdfError::Dimension(format!("code of {} values for a {}-d basis", z.len(), self.dim())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(z).zip(&self.mean).map(|((c, z), m)| c * (z - m)).sum())
            .collect())
    }

    /// `mean + Σ p_i · component_i`; directions beyond `p.len()` stay at the mean.
    pub fn control_to_latent(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() > self.k() {
            return Err(NdfError::Dimension(format!(
                "{} control values for {} components",
                p.len(),
                self.k()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NdfError::NumericFailure("non-finite control value".into()));
        }
        let mut z = self.mean.clone();
        for (pi, c) in p.iter().zip(&self.components) {
            for (zj, cj) in z.iter_mut().zip(c) {
                *zj += pi * cj;
            }
        }
        Ok(z)
    }
}

/// One `N(0, I_d)` draw, fully determined by `seed`.
pub fn sample_prior(d_z: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d_z).map(|_| rng.sample(StandardNormal)).collect()
}

/// Trained models and statistics needed to turn `(z, class)` into audio.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    dsp: DspConfig,
    cwae: CwaeModel,
    mcnn: McnnModel,
    stats: ScalingStats,
    pca: Option<PcaBasis>,
}

impl Synthesizer {
    pub fn new(
        dsp: DspConfig,
        cwae: CwaeModel,
        mcnn: McnnModel,
        stats: ScalingStats,
        pca: Option<PcaBasis>,
    ) -> Result<Self> {
        let c = cwae.config();
        if c.n_mels != dsp.n_mels || c.n_frames != dsp.n_frames() {
            return Err(NdfError::Config(format!(
                "CWAE spectrograms are {}×{}, the profile uses {}×{}",
                c.n_mels,
                c.n_frames,
                dsp.n_mels,
                dsp.n_frames()
            )));
        }
        if mcnn.config().n_mels != dsp.n_mels || mcnn.config().upsampling() != dsp.hop {
            return Err(NdfError::Config(format!(
                "MCNN expects {} Mels with upsampling {}, the profile uses {} Mels with hop {}",
                mcnn.config().n_mels,
                mcnn.config().upsampling(),
                dsp.n_mels,
                dsp.hop
            )));
        }
        if stats.len() != dsp.n_mels * dsp.n_frames() {
            return Err(NdfError::Config("scaling statistics do not match the profile".into()));
        }
        if let Some(p) = &pca {
            if p.dim() != c.d_z {
                return Err(NdfError::Config(format!(
                    "PCA basis is {}-d, latent space is {}-d",
                    p.dim(),
                    c.d_z
                )));
            }
        }
        Ok(Synthesizer {
            dsp,
            cwae,
            mcnn,
            stats,
            pca,
        })
    }

    pub fn dsp(&self) -> &DspConfig {
        &self.dsp
    }

    pub fn n_classes(&self) -> usize {
        self.cwae.config().n_classes
    }

    pub fn d_z(&self) -> usize {
        self.cwae.config().d_z
    }

    pub fn pca(&self) -> Option<&PcaBasis> {
        self.pca.as_ref()
    }

    /// Latent code for control values `p`, through the fitted basis.
    pub fn latent_for(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.pca
            .as_ref()
            .ok_or_else(|| NdfError::State("no PCA basis has been fitted".into()))?
            .control_to_latent(p)
    }

    /// Decode, undo the log-scaling, invert with a binarized mask and clamp
    /// to `[-1, 1]`.
    pub fn generate(&self, z: &[f64], class: usize) -> Result<AudioClip> {
        if z.len() != self.d_z() {
            return Err(NdfError::Dimension(format!("code of {} values, expected {}", z.len(), self.d_z())));
        }
        let x = self.cwae.decode(&Tensor::new(&[1, z.len()], z.to_vec())?, &[class])?;
        let mel = self.stats.destandardize_exp(x.data())?;
        let mel = Tensor::new(&[1, self.dsp.n_mels, self.dsp.n_frames()], mel)?;
        let out = self.mcnn.generate(&mel)?;
        let samples = out.waveform.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(AudioClip::new(samples))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_codes(n: usize, scales: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                scales
                    .iter()
                    .map(|s| s * rng.sample::<f64, _>(StandardNormal) + 0.5)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn axis_aligned_variances_are_recovered() {
        let codes = gaussian_codes(20_000, &[2.0, 2f64.sqrt(), 1.0, 0.3], 1);
        let basis = fit_pca(&codes, 3).unwrap();
        for (i, expected) in [4.0, 2.0, 1.0].iter().enumerate() {
            assert!((basis.explained_variance[i] - expected).abs() < 0.1 * expected);
            assert!(basis.components[i][i].abs() > 0.99);
        }
        assert_eq!(basis.meaningful, 3);
    }

    #[test]
    fn rows_are_orthonormal_and_ordered() {
        let codes = gaussian_codes(200, &[1.0, 3.0, 0.5, 2.0, 1.5], 2);
        let basis = fit_pca(&codes, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = basis.components[i].iter().zip(&basis.components[j]).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-8);
            }
        }
        assert!(basis.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_basis_round_trip() {
        let codes = gaussian_codes(50, &[1.0, 2.0, 0.5], 3);
        let basis = fit_pca(&codes, 3).unwrap();
        for z in &codes {
            let back = basis.control_to_latent(&basis.project(z).unwrap()).unwrap();
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn origin_maps_to_mean_and_errors_are_reported() {
        let codes = gaussian_codes(10, &[1.0, 1.0, 1.0, 1.0], 4);
        let basis = fit_pca(&codes, 3).unwrap();
        assert_eq!(basis.control_to_latent(&[0.0; 3]).unwrap(), basis.mean);
        assert!(basis.control_to_latent(&[0.0; 4]).is_err());
        assert!(basis.control_to_latent(&[f64::NAN]).is_err());
        assert!(fit_pca(&codes[..3], 3).is_err());
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        let codes: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let basis = fit_pca(&codes, 3).unwrap();
        assert_eq!(basis.meaningful, 1);
    }

    #[test]
    fn prior_sampling_is_seeded() {
        assert_eq!(sample_prior(8, 5), sample_prior(8, 5));
        assert_ne!(sample_prior(8, 5), sample_prior(8, 6));
    }
}
