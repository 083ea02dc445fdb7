mod common;

use common::{bits, rows_to_tensor};
use ndf_core::cwae::mmd_u_statistic;
use ndf_core::dsp::{preprocess, AudioClip, MelFilterbank};
use ndf_core::mcnn::binarize_mask;
use ndf_core::{Checkpoint, Profile};
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocess_marks_support_and_normalizes_peak(
        raw in prop::collection::vec(-2.0f64..2.0, 2..=256),
        spike in 0.05f64..4.0,
    ) {
        let mut raw = raw;
        raw[0] = spike;
        let (clip, mask) = preprocess(&AudioClip::new(raw.clone()), 256).unwrap();
        prop_assert_eq!(clip.len(), 256);
        prop_assert_eq!(mask.ones(), raw.len());
        prop_assert!((clip.peak() - 1.0).abs() < 1e-12);
        prop_assert!(clip.samples()[raw.len()..].iter().all(|&v| v == 0.0));
        // Idempotent once canonical.
        let (again, _) = preprocess(&clip, 256).unwrap();
        prop_assert_eq!(bits(again.samples()), bits(clip.samples()));
    }

    #[test]
    fn mmd_is_symmetric_and_translation_invariant(
        (x, y) in (2usize..8).prop_flat_map(|n| (rows(n, 3), rows(n, 3))),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let (tx, ty) = (rows_to_tensor(&x), rows_to_tensor(&y));
        let base = mmd_u_statistic(&tx, &ty, 6.0).unwrap();
        prop_assert!((mmd_u_statistic(&ty, &tx, 6.0).unwrap() - base).abs() < 1e-12);
        let moved = |r: &[Vec<f64>]| {
            rows_to_tensor(&r.iter().map(|z| z.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect::<Vec<_>>())
        };
        prop_assert!((mmd_u_statistic(&moved(&x), &moved(&y), 6.0).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn mel_projection_is_linear(
        a in prop::collection::vec(0.0f64..2.0, 65 * 3),
        b in prop::collection::vec(0.0f64..2.0, 65 * 3),
        k in -3.0f64..3.0,
    ) {
        let bank = MelFilterbank::new(65, 64, 22050).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| k * x + y).collect();
        let (pa, pb, pm) = (bank.project(&a, 3).unwrap(), bank.project(&b, 3).unwrap(), bank.project(&mix, 3).unwrap());
        for i in 0..pm.len() {
            prop_assert!((pm[i] - (k * pa[i] + pb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn binarized_mask_is_a_threshold(m in prop::collection::vec(0.0f64..=1.0, 0..64)) {
        let b = binarize_mask(&m);
        for (p, keep) in m.iter().zip(b) {
            prop_assert_eq!(keep, *p >= 0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn damaged_checkpoints_are_rejected_not_trusted(cut in 0usize..2000, flip in 0usize..8) {
        let mut ck = Checkpoint::new(Profile::Desk);
        ck.pca = Some(ndf_core::fit_pca(&[vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 2.0, 5.0], vec![2.0, 1.0, 0.0, 4.0], vec![0.5, 2.0, 1.0, 3.0], vec![3.0, 1.0, 1.0, 2.0]], 3).unwrap());
        let bytes = ck.to_bytes().unwrap();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        let mut bad = bytes.clone();
        bad[flip] ^= 0x20;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
