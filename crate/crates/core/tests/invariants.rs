use fsad_core::calibration::{predictive_entropy, split_calibration, LabeledScores, PlattParams};
use fsad_core::encoder::{Image, ToyEncoder};
use fsad_core::memory_bank::{aggregate_meantop1, cosine_distance};
use fsad_core::metrics::{auroc, average_precision, brier, ece, f1_max, g_mean_max};
use fsad_core::probe_attack::{fgsm_attack, AttackConfig, LinearProbe, PatchMask};
use proptest::prelude::*;

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len).prop_filter("non-degenerate", |v| {
        v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3
    })
}

/// Scores with both labels present.
fn labeled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..max).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 10.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn cosine_distance_is_bounded_and_symmetric(
        (x, y) in (1usize..24).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))),
        scale in 0.01f64..100.0,
    ) {
        let d = cosine_distance(&x, &y).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(d, cosine_distance(&y, &x).unwrap());
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        prop_assert!((cosine_distance(&scaled, &y).unwrap() - d).abs() < 1e-9);
        prop_assert!(cosine_distance(&x, &x).unwrap() < 1e-12);
    }

    #[test]
    fn meantop1_lies_between_mean_and_max(scores in prop::collection::vec(0.0f64..2.0, 1..500)) {
        let agg = aggregate_meantop1(&scores);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(agg <= max + 1e-12);
        prop_assert!(agg >= mean - 1e-12);
        if scores.len() <= 100 {
            prop_assert_eq!(agg, max);
        }
    }

    #[test]
    fn entropy_is_symmetric_and_rises_towards_one_half(p in 0.0f64..=0.5, q in 0.0f64..=0.5) {
        prop_assert!((predictive_entropy(p) - predictive_entropy(1.0 - p)).abs() < 1e-12);
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assert!(predictive_entropy(lo) <= predictive_entropy(hi) + 1e-15);
        prop_assert!(predictive_entropy(p) <= std::f64::consts::LN_2 + 1e-15);
    }

    #[test]
    fn platt_with_positive_slope_is_monotone(
        a in 0.0f64..50.0,
        b in -20.0f64..20.0,
        s in -2.0f64..2.0,
        t in -2.0f64..2.0,
    ) {
        let params = PlattParams { a, b };
        let (lo, hi) = if s < t { (s, t) } else { (t, s) };
        let (plo, phi) = (params.apply(lo), params.apply(hi));
        prop_assert!(plo <= phi);
        prop_assert!((0.0..=1.0).contains(&plo) && (0.0..=1.0).contains(&phi));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified(
        (scores, labels) in labeled(80),
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let ids = (0..scores.len()).map(|i| format!("s{i}")).collect();
        let data = LabeledScores::new(ids, scores, labels.clone()).unwrap();
        let split = split_calibration(&data, fraction, seed).unwrap();
        let mut all: Vec<usize> = split.calibration_indices.iter().chain(&split.evaluation_indices).cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in [false, true] {
            let size = labels.iter().filter(|&&l| l == class).count();
            let want = ((fraction * size as f64).round() as usize).clamp(1, size);
            let got = split.calibration.labels.iter().filter(|&&l| l == class).count();
            prop_assert_eq!(got, want);
        }
        prop_assert_eq!(split_calibration(&data, fraction, seed).unwrap(), split);
    }

    #[test]
    fn fgsm_stays_within_budget(
        pixels in prop::collection::vec(0.0f64..=1.0, 4 * 4 * 3),
        epsilon in 0.0f64..0.5,
        seed in any::<u64>(),
        weights in prop::collection::vec(-1.0f64..1.0, 5),
        labels in prop::collection::vec(any::<bool>(), 4),
    ) {
        let encoder = ToyEncoder::new(2, 5, seed).unwrap();
        let probe = LinearProbe { weights, bias: 0.1 };
        let image = Image::new(4, 4, pixels).unwrap();
        let mask = PatchMask::new(2, 2, labels).unwrap();
        let adv = fgsm_attack(&encoder, &probe, &image, &mask, &AttackConfig::new(epsilon).unwrap()).unwrap();
        prop_assert!(adv.in_unit_range());
        for (a, x) in adv.pixels().iter().zip(image.pixels()) {
            prop_assert!((a - x).abs() <= epsilon + 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn ranking_metrics_ignore_increasing_maps(
        (scores, labels) in labeled(60),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let mapped: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&mapped, &labels).unwrap());
        prop_assert_eq!(f1_max(&scores, &labels).unwrap(), f1_max(&mapped, &labels).unwrap());
        prop_assert_eq!(g_mean_max(&scores, &labels).unwrap(), g_mean_max(&mapped, &labels).unwrap());
    }

    #[test]
    fn probability_metrics_are_bounded(
        probs in prop::collection::vec(0.0f64..=1.0, 1..200),
        bins in 1usize..30,
        seed in any::<u64>(),
    ) {
        let labels: Vec<bool> = probs.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        let (e, table) = ece(&probs, &labels, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(table.total(), probs.len());
        prop_assert!((0.0..=1.0).contains(&brier(&probs, &labels).unwrap()));
    }
}
