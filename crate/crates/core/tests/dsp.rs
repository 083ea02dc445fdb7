mod common;

use std::sync::Arc;

use common::{max_abs_diff, oracle_filter, oracle_mel, oracle_stft, rng, uniform};
use ndf_core::diff::Graph;
use ndf_core::dsp::{DspConfig, MelFilterbank, StftPlan, SAMPLE_RATE};
use ndf_core::{McnnModel, Profile, Tensor};

#[test]
fn filterbank_matches_per_filter_oracle() {
    for cfg in [DspConfig::desk(), DspConfig::full()] {
        let bank = MelFilterbank::new(cfg.n_bins(), cfg.n_mels, SAMPLE_RATE).unwrap();
        let matrix = bank.matrix();
        for m in 0..cfg.n_mels {
            let filter = oracle_filter(cfg.n_bins(), cfg.n_mels, SAMPLE_RATE as f64, m);
            for (b, w) in filter.iter().enumerate() {
                assert!((matrix.data()[b * cfg.n_mels + m] - w).abs() < 1e-12, "filter {m} bin {b}");
            }
        }
    }
}

#[test]
fn mel_projection_matches_per_filter_oracle() {
    let mut r = rng(21);
    for cfg in [DspConfig::desk(), DspConfig::full()] {
        let frames = 7;
        let stft = uniform(&[cfg.n_bins(), frames], 0.0, 3.0, &mut r);
        let bank = MelFilterbank::new(cfg.n_bins(), cfg.n_mels, SAMPLE_RATE).unwrap();
        let got = bank.project(stft.data(), frames).unwrap();
        let expected = oracle_mel(stft.data(), cfg.n_bins(), cfg.n_mels, frames, SAMPLE_RATE as f64);
        assert!(max_abs_diff(&got, &expected) < 1e-10);
    }
}

#[test]
fn analyzer_matches_direct_dft_then_oracle_filters() {
    let cfg = DspConfig::desk();
    let an = cfg.analyzer().unwrap();
    let x = uniform(&[cfg.canonical_len], -1.0, 1.0, &mut rng(22));
    let stft = oracle_stft(x.data(), cfg.n_fft, cfg.win_len, cfg.hop);
    assert!(max_abs_diff(&an.plan.magnitude(x.data()).unwrap(), &stft) < 1e-10);
    let expected = oracle_mel(&stft, cfg.n_bins(), cfg.n_mels, cfg.n_frames(), SAMPLE_RATE as f64);
    assert!(max_abs_diff(&an.mel(x.data()).unwrap(), &expected) < 1e-10);
}

#[test]
fn graph_and_plain_chains_agree() {
    let cfg = DspConfig::desk();
    let an = cfg.analyzer().unwrap();
    let x = uniform(&[2, cfg.canonical_len], -1.0, 1.0, &mut rng(23));
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.stft_magnitude(v, &an.plan).unwrap();
    let m = g.mel_project(s, &an.bank).unwrap();
    let per = cfg.n_mels * cfg.n_frames();
    for i in 0..2 {
        let plain = an.mel(x.outer(i)).unwrap();
        assert!(max_abs_diff(&g.value(m).data()[i * per..(i + 1) * per], &plain) < 1e-12);
    }
}

#[test]
fn zero_input_stays_zero_through_the_chain() {
    for profile in [Profile::Desk, Profile::Full] {
        let cfg = profile.dsp();
        let plan = Arc::new(StftPlan::new(cfg.n_fft, cfg.win_len, cfg.hop).unwrap());
        let bank = Arc::new(MelFilterbank::new(cfg.n_bins(), cfg.n_mels, SAMPLE_RATE).unwrap());
        let zeros = vec![0.0; cfg.canonical_len];
        let stft = plan.magnitude(&zeros).unwrap();
        assert!(stft.iter().all(|&v| v == 0.0));
        let mel = bank.project(&stft, cfg.n_frames()).unwrap();
        assert!(mel.iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, cfg.canonical_len]));
        let s = g.stft_magnitude(v, &plan).unwrap();
        let m = g.mel_project(s, &bank).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }
    // The inverter closes the chain: zero Mel in, zero waveform out.
    let model = McnnModel::new(Profile::Desk.mcnn(), &mut rng(24)).unwrap();
    let out = model.generate(&Tensor::zeros(&[1, 64, 16])).unwrap();
    assert!(out.waveform.iter().all(|&v| v == 0.0));
}
