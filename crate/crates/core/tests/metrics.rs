mod common;

use common::*;
use fakeprint::detector::ConstantScorer;
use fakeprint::evaluation::{
    accuracy_at_threshold, average_precision, calibrate_threshold, evaluate, operating_point, tpr_at_fpr,
};
use fakeprint::manifest::Label::{self, Fake, Real};
use proptest::prelude::*;
use rand::SeedableRng;

#[test]
fn constant_detector_is_at_chance() {
    let pairs: Vec<(f64, Label)> = (0..20).map(|i| (ConstantScorer(0.7).0, if i < 10 { Fake } else { Real })).collect();
    let r = accuracy_at_threshold(&score_set(&pairs), 0.5).unwrap();
    assert_eq!(r.overall, 0.5);
}

#[test]
fn hand_counted_accuracies() {
    let s = score_set(&[(0.4, Real), (0.6, Fake), (0.6, Real), (0.4, Fake)]);
    assert_eq!(accuracy_at_threshold(&s, 0.5).unwrap().overall, 0.5);

    let s = score_set(&[(0.6, Real), (0.4, Fake)]);
    assert_eq!(accuracy_at_threshold(&s, 0.5).unwrap().overall, 0.0);

    let mut pairs: Vec<(f64, Label)> = [0.1, 0.2, 0.6, 0.7].iter().map(|&s| (s, Real)).collect();
    pairs.extend([0.4, 0.8, 0.9, 0.55].iter().map(|&s| (s, Fake)));
    let r = accuracy_at_threshold(&score_set(&pairs), 0.5).unwrap();
    assert_eq!(r.real, Some(0.5));
    assert_eq!(r.fake, Some(0.75));
    assert_eq!(r.groups.len(), 2);
}

#[test]
fn perfect_scores() {
    let mut pairs = vec![(0.0, Real); 20];
    pairs.extend(vec![(1.0, Fake); 20]);
    let s = score_set(&pairs);
    assert_eq!(average_precision(&s).unwrap(), 1.0);
    assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), 1.0);
    assert_eq!(accuracy_at_threshold(&s, 0.5).unwrap().overall, 1.0);
    let t = calibrate_threshold(&s).unwrap();
    assert_eq!(t, 0.5);
}

#[test]
fn all_tied_ap_is_base_rate() {
    for (p, n) in [(1usize, 2usize), (3, 10), (7, 8)] {
        let pairs: Vec<(f64, Label)> = (0..n).map(|i| (0.3, if i < p { Fake } else { Real })).collect();
        let ap = average_precision(&score_set(&pairs)).unwrap();
        assert!((ap - p as f64 / n as f64).abs() < 1e-15);
    }
}

#[test]
fn five_percent_of_100_distinct_reals() {
    let mut pairs: Vec<(f64, Label)> = (0..100).map(|i| (i as f64 / 100.0, Real)).collect();
    pairs.extend((0..50).map(|i| (0.5 + i as f64 / 100.0 + 0.005, Fake)));
    let s = score_set(&pairs);
    let op = operating_point(&s, 0.05).unwrap();
    let fp = pairs.iter().filter(|p| p.1 == Real && p.0 >= op.threshold).count();
    assert_eq!(fp, 5);
    assert_eq!(op.tpr, tpr_oracle(&pairs, 0.05));
}

#[test]
fn fpr_target_unreachable_reports_zero() {
    let s = score_set(&[(0.9, Real), (0.1, Fake)]);
    let op = operating_point(&s, 0.05).unwrap();
    assert!(op.threshold.is_infinite());
    assert_eq!(op.tpr, 0.0);
}

#[test]
fn single_label_and_bad_threshold_are_errors() {
    let s = score_set(&[(0.2, Real), (0.3, Real)]);
    assert!(average_precision(&s).is_err());
    assert!(tpr_at_fpr(&s, 0.05).is_err());
    assert!(calibrate_threshold(&s).is_err());
    assert!(accuracy_at_threshold(&s, 1.0).is_err());
    assert!(accuracy_at_threshold(&s, 0.0).is_err());
}

#[test]
fn separable_threshold_is_gap_midpoint() {
    let s = score_set(&[(0.1, Real), (0.3, Real), (0.7, Fake), (0.9, Fake)]);
    assert_eq!(calibrate_threshold(&s).unwrap(), 0.5);
    let s = score_set(&[(0.1, Real), (0.2, Fake), (0.3, Real), (0.4, Fake)]);
    // 0.15 and 0.35 both give 3/4; the lower one wins
    assert_eq!(calibrate_threshold(&s).unwrap(), (0.1 + 0.2) / 2.0);
}

#[test]
fn report_carries_every_metric() {
    let s = score_set(&[(0.1, Real), (0.3, Real), (0.7, Fake), (0.2, Fake)]);
    let r = evaluate(&s, 0.5, 0.05).unwrap();
    assert_eq!((r.n_real, r.n_fake), (2, 2));
    assert_eq!(r.accuracy.overall, 0.75);
    assert!(r.groups_csv().starts_with("source_tag,label,n,accuracy"));
}

#[test]
fn random_sets_match_oracles() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let pairs = random_pairs(&mut rng, 200);
        let s = score_set(&pairs);
        assert!((average_precision(&s).unwrap() - ap_oracle(&pairs)).abs() <= 1e-12);
        for target in [0.01, 0.05, 0.1, 0.3] {
            assert_eq!(tpr_at_fpr(&s, target).unwrap(), tpr_oracle(&pairs, target));
        }
    }
}

proptest! {
    #[test]
    fn tpr_monotone_in_target(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = score_set(&random_pairs(&mut rng, 100));
        prop_assert!(tpr_at_fpr(&s, 0.10).unwrap() >= tpr_at_fpr(&s, 0.05).unwrap());
    }

    #[test]
    fn calibration_dominates_half(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, 100);
        let s = score_set(&pairs);
        let t = calibrate_threshold(&s).unwrap();
        prop_assert!(t > 0.0 && t < 1.0);
        let cal = accuracy_at_threshold(&s, t).unwrap().overall;
        prop_assert!(cal >= accuracy_at_threshold(&s, 0.5).unwrap().overall);
        prop_assert!(cal >= grid_best(&pairs, 1001).0);
    }

    #[test]
    fn ap_in_unit_interval(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ap = average_precision(&score_set(&random_pairs(&mut rng, 60))).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}
