use perser_core::calibrate::{calibrate, cosine, topk_similar, ShiftMode, SpeakerProfile};
use perser_core::metrics::{ccc, kl_gaussian, mean, pearson, population_std};
use perser_core::tensor::Matrix;
use proptest::prelude::*;

fn series(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, min..max)
}

fn spread(x: &[f64]) -> f64 {
    population_std(x)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn ccc_is_symmetric_and_bounded((x, y) in pair()) {
        prop_assume!(spread(&x) > 1e-6 || spread(&y) > 1e-6);
        let xy = ccc(&x, &y).unwrap();
        let yx = ccc(&y, &x).unwrap();
        prop_assert!(close(xy, yx, 1e-12));
        prop_assert!(xy.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn ccc_ignores_joint_permutation((x, y) in pair(), rot in 0usize..40) {
        prop_assume!(spread(&x) > 1e-6 || spread(&y) > 1e-6);
        let r = rot % x.len();
        let mut px = x.clone();
        let mut py = y.clone();
        px.rotate_left(r);
        py.rotate_left(r);
        px.reverse();
        py.reverse();
        prop_assert!(close(ccc(&x, &y).unwrap(), ccc(&px, &py).unwrap(), 1e-10));
    }

    #[test]
    fn ccc_of_series_with_itself_is_one(x in series(2, 50)) {
        prop_assume!(spread(&x) > 1e-6);
        prop_assert_eq!(ccc(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn pearson_ignores_positive_affine_maps((x, y) in pair(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        prop_assume!(spread(&x) > 1e-3 && spread(&y) > 1e-3);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ay: Vec<f64> = y.iter().map(|v| a * v - b).collect();
        let base = pearson(&x, &y).unwrap();
        prop_assert!(close(base, pearson(&ax, &y).unwrap(), 1e-9));
        prop_assert!(close(base, pearson(&x, &ay).unwrap(), 1e-9));
    }

    #[test]
    fn gaussian_kl_is_non_negative(m0 in -10.0f64..10.0, s0 in 0.01f64..10.0, m1 in -10.0f64..10.0, s1 in 0.01f64..10.0) {
        prop_assert!(kl_gaussian(m0, s0, m1, s1).unwrap() >= 0.0);
        prop_assert_eq!(kl_gaussian(m0, s0, m0, s0).unwrap(), 0.0);
    }

    #[test]
    fn calibration_meets_target_moments(
        preds in series(2, 60),
        mu_bar in 1.0f64..7.0,
        sigma_bar in 0.05f64..3.0,
    ) {
        prop_assume!(spread(&preds) > 1e-3);
        let (mu, sigma) = (mean(&preds), spread(&preds));
        let both = calibrate(&preds, mu_bar, sigma_bar, ShiftMode::Both, 1e-6).unwrap();
        prop_assert!((mean(&both) - mu_bar).abs() < 1e-9);
        prop_assert!((spread(&both) - sigma_bar).abs() < 1e-9);
        let mu_only = calibrate(&preds, mu_bar, sigma_bar, ShiftMode::Mu, 1e-6).unwrap();
        prop_assert!((spread(&mu_only) - sigma).abs() < 1e-9);
        let sigma_only = calibrate(&preds, mu_bar, sigma_bar, ShiftMode::Sigma, 1e-6).unwrap();
        prop_assert!((mean(&sigma_only) - mu).abs() < 1e-9);
        prop_assert_eq!(calibrate(&preds, mu_bar, sigma_bar, ShiftMode::None, 1e-6).unwrap(), preds);
    }

    #[test]
    fn calibration_is_idempotent(preds in series(2, 60), mu_bar in 1.0f64..7.0, sigma_bar in 0.05f64..3.0) {
        prop_assume!(spread(&preds) > 1e-3);
        for mode in [ShiftMode::Mu, ShiftMode::Sigma, ShiftMode::Both] {
            let once = calibrate(&preds, mu_bar, sigma_bar, mode, 1e-6).unwrap();
            let twice = calibrate(&once, mu_bar, sigma_bar, mode, 1e-6).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibration_preserves_rank_and_correlation(
        (preds, truth) in pair(),
        mu_bar in 1.0f64..7.0,
        sigma_bar in 0.05f64..3.0,
    ) {
        prop_assume!(spread(&preds) > 1e-3 && spread(&truth) > 1e-3);
        let out = calibrate(&preds, mu_bar, sigma_bar, ShiftMode::Both, 1e-6).unwrap();
        for i in 0..preds.len() {
            for j in 0..preds.len() {
                if preds[i] < preds[j] {
                    prop_assert!(out[i] < out[j]);
                }
            }
        }
        prop_assert!(close(pearson(&preds, &truth).unwrap(), pearson(&out, &truth).unwrap(), 1e-9));
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        (a, b) in (2usize..20).prop_flat_map(|n| (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((cosine(&a, &b).unwrap() - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn topk_ignores_rescaled_profiles(
        vectors in prop::collection::vec(prop::collection::vec(0.05f64..1.0, 6), 3..12),
        target in prop::collection::vec(-1.0f64..1.0, 6),
        scales in prop::collection::vec(0.1f64..10.0, 12),
    ) {
        prop_assume!(target.iter().any(|v| v.abs() > 1e-3));
        let profiles = |scale: bool| -> Vec<SpeakerProfile> {
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| SpeakerProfile {
                    speaker_id: format!("s{i:02}"),
                    vector: v.iter().map(|x| if scale { x * scales[i] } else { *x }).collect(),
                    n_utterances: 1,
                    label_mu: None,
                    label_sigma: None,
                })
                .collect()
        };
        let (plain, scaled) = (profiles(false), profiles(true));
        let k = vectors.len().min(3);
        let a: Vec<(String, f64)> = topk_similar(&target, &plain, k).unwrap().into_iter().map(|(p, s)| (p.speaker_id.clone(), s)).collect();
        let b: Vec<(String, f64)> = topk_similar(&target, &scaled, k).unwrap().into_iter().map(|(p, s)| (p.speaker_id.clone(), s)).collect();
        for ((ia, sa), (ib, sb)) in a.iter().zip(&b) {
            prop_assert!((sa - sb).abs() < 1e-12);
            // Only exact ties in rounding may reorder.
            if ia != ib {
                prop_assert!(a.iter().any(|(i, s)| i == ib && (s - sb).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn mean_pool_is_linear(rows in 1usize..10, cols in 1usize..8, alpha in -4.0f64..4.0, seed in any::<u64>()) {
        let m = Matrix::from_fn(rows, cols, |r, c| ((seed.wrapping_add((r * cols + c) as u64) % 1000) as f64) / 100.0 - 5.0);
        let scaled = m.map(|v| alpha * v);
        let lhs = scaled.mean_rows();
        let rhs = m.mean_rows().map(|v| alpha * v);
        for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }
}
