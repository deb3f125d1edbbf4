mod common;

use common::{gen, oracle};
use incunabula::detection::Detection;
use incunabula::evaluation::{f1_confidence_curve, EvalOptions};
use incunabula::LayoutClass;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn curve_matches_naive_sweep(seed in any::<u64>()) {
        let (dets, gts) = gen::corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        let expected = oracle::curve(&dets, &gts, 0.5, false);
        let got = f1_confidence_curve(&dets, &gts, EvalOptions::default(), None);
        prop_assert_eq!(expected.is_some(), got.is_ok());
        if let (Some(e), Ok(g)) = (expected, got) {
            prop_assert_eq!(e.len(), g.len());
            for (a, b) in e.iter().zip(&g) {
                prop_assert_eq!(a.threshold, b.threshold);
                prop_assert!((a.mean_f1 - b.mean_f1).abs() <= 1e-12);
            }
        }
    }

    /// Squaring confidences keeps their order, so counts at matching
    /// thresholds are unchanged.
    #[test]
    fn monotone_rescoring_preserves_counts(seed in any::<u64>()) {
        let (dets, gts) = gen::corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assume!(gts.iter().any(|g| !g.regions.is_empty()));
        let squared: Vec<Vec<Detection<f64>>> = dets
            .iter()
            .map(|p| p.iter().map(|d| Detection { confidence: d.confidence * d.confidence, ..*d }).collect())
            .collect();
        let a = f1_confidence_curve(&dets, &gts, EvalOptions::default(), None).unwrap();
        let b = f1_confidence_curve(&squared, &gts, EvalOptions::default(), None).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(&p.per_class, &q.per_class);
            prop_assert_eq!(p.mean_f1, q.mean_f1);
        }
    }

    /// Raising the threshold never adds true or false positives.
    #[test]
    fn counts_shrink_with_threshold(seed in any::<u64>()) {
        let (dets, gts) = gen::corpus(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assume!(gts.iter().any(|g| !g.regions.is_empty()));
        let curve = f1_confidence_curve(&dets, &gts, EvalOptions::default(), None).unwrap();
        for w in curve.windows(2) {
            prop_assert!((0.0..=1.0).contains(&w[1].mean_f1));
            for class in LayoutClass::ALL {
                let lo = w[0].per_class.get(&class).map(|p| (p.counts.tp + p.counts.fp, p.gt));
                let hi = w[1].per_class.get(&class).map(|p| (p.counts.tp + p.counts.fp, p.gt));
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    prop_assert!(hi.0 <= lo.0);
                    prop_assert_eq!(hi.1, lo.1);
                }
            }
        }
    }

    #[test]
    fn edit_distance_matches_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<char> = gen::text(&mut rng, 30).chars().collect();
        let b: Vec<char> = gen::text(&mut rng, 30).chars().collect();
        prop_assert_eq!(incunabula::ocr::levenshtein(&a, &b), oracle::edit_distance(&a, &b));
    }
}
