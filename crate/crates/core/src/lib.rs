//! Neural drum synthesis: a conditional Wasserstein autoencoder over Mel
//! spectrograms, a multi-head convolutional spectrogram inverter, and the
//! training and latent-control machinery around them.

pub mod checkpoint;
pub mod cwae;
pub mod diff;
pub mod dsp;
pub mod error;
pub mod latent;
pub mod mcnn;
pub mod profile;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use cwae::{CwaeConfig, CwaeModel};
pub use dsp::{AudioClip, DspConfig, ScalingStats, SupportMask};
pub use error::{NdfError, Result};
pub use latent::{fit_pca, sample_prior, PcaBasis, Synthesizer, N_CONTROLS};
pub use mcnn::{McnnConfig, McnnModel};
pub use profile::Profile;
pub use tensor::Tensor;
