//! Fixtures shared by the benchmarks: untrained models at a given profile,
//! wired into a synthesizer with a basis fitted to prior draws.

use ndf_core::{fit_pca, sample_prior, CwaeModel, McnnModel, Profile, ScalingStats, Synthesizer, N_CONTROLS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn synthesizer(profile: Profile, seed: u64) -> Synthesizer {
    let dsp = profile.dsp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cwae = CwaeModel::new(profile.cwae(3), &mut rng).expect("profile configurations are valid");
    let mcnn = McnnModel::new(profile.mcnn(), &mut rng).expect("profile configurations are valid");
    let n = dsp.n_mels * dsp.n_frames();
    let stats = ScalingStats {
        mean: vec![-2.0; n],
        std: vec![1.0; n],
    };
    let d_z = cwae.config().d_z;
    let codes: Vec<Vec<f64>> = (0..4 * d_z as u64).map(|s| sample_prior(d_z, seed ^ s)).collect();
    let pca = fit_pca(&codes, N_CONTROLS).expect("enough codes for the basis");
    Synthesizer::new(dsp, cwae, mcnn, stats, Some(pca)).expect("profile components agree")
}
