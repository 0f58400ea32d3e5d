mod common;

use common::{brute_force_max_matching, pair_count_auc, rng};
use mitoloc::evaluation::{auc, f1_score, image_level_metrics, match_detections, prf1, Counts, EvalError};
use proptest::prelude::*;
use rand::Rng;

fn points(r: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (r.random_range(0.0..60.0), r.random_range(0.0..60.0))).collect()
}

#[test]
fn optimal_matching_beats_greedy_on_crossing_points() {
    let dets = [(0.0, 0.0), (0.0, 4.0)];
    let anns = [(0.0, 1.0), (0.0, -5.0)];
    let m = match_detections(&dets, &anns, 5.0).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    assert_eq!(brute_force_max_matching(&dets, &anns, 5.0).0, 2);
}

#[test]
fn matching_agrees_with_exhaustive_search() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let (nd, na) = (r.random_range(0..=6), r.random_range(0..=6));
        let (dets, anns) = (points(&mut r, nd), points(&mut r, na));
        let radius = r.random_range(5.0..25.0);
        let m = match_detections(&dets, &anns, radius).unwrap();
        let (best, best_dist) = brute_force_max_matching(&dets, &anns, radius);
        assert_eq!(m.tp, best);
        assert_eq!((m.fp, m.fn_), (nd - best, na - best));
        let total: f64 = m.pairs.iter().map(|p| p.distance).sum();
        assert!((total - best_dist).abs() < 1e-9, "{total} vs {best_dist}");
        for p in &m.pairs {
            assert!(p.distance <= radius);
        }
    }
}

#[test]
fn degenerate_sides_are_symmetric() {
    let pts = [(1.0, 1.0), (5.0, 5.0), (9.0, 9.0)];
    let none = match_detections(&[], &pts, 30.0).unwrap();
    assert_eq!((none.tp, none.fp, none.fn_), (0, 0, 3));
    let spurious = match_detections(&pts, &[], 30.0).unwrap();
    assert_eq!((spurious.tp, spurious.fp, spurious.fn_), (0, 3, 0));
    assert!(matches!(match_detections(&pts, &pts, f64::NAN), Err(EvalError::Contract(_))));
}

#[test]
fn radius_boundary() {
    let hit = match_detections(&[(0.0, 29.9)], &[(0.0, 0.0)], 30.0).unwrap();
    assert_eq!((hit.tp, hit.fp, hit.fn_), (1, 0, 0));
    let miss = match_detections(&[(0.0, 30.1)], &[(0.0, 0.0)], 30.0).unwrap();
    assert_eq!((miss.tp, miss.fp, miss.fn_), (0, 1, 1));
}

#[test]
fn reference_rows_satisfy_the_harmonic_mean() {
    for (p, r, f) in [(0.739, 0.720, 0.729), (0.675, 0.623, 0.648), (0.613, 0.671, 0.640), (0.641, 0.642, 0.642), (0.764, 0.714, 0.738)] {
        assert!((f1_score(p, r) - f).abs() <= 0.002, "({p}, {r}) -> {}", f1_score(p, r));
    }
    // A row whose reported F1 (0.750) is not the harmonic mean of its P and R.
    let f = f1_score(0.710, 0.760);
    assert!((f - 0.7341).abs() < 1e-4);
    assert!((f - 0.750).abs() > 0.002);
}

#[test]
fn prf1_from_counts() {
    let m = prf1(Counts { tp: 3, fp: 1, fn_: 2 });
    assert_eq!((m.precision, m.recall), (0.75, 0.6));
    assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    let z = prf1(Counts { tp: 0, fp: 4, fn_: 2 });
    assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    let mut total = Counts::default();
    total += Counts { tp: 1, fp: 0, fn_: 0 };
    total += Counts { tp: 0, fp: 3, fn_: 1 };
    assert_eq!(total, Counts { tp: 1, fp: 3, fn_: 1 });
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(2);
    for _ in 0..100 {
        let n = r.random_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
        assert!((auc(&scores, &labels).unwrap() - pair_count_auc(&scores, &labels)).abs() < 1e-9);
    }
}

#[test]
fn auc_of_uninformative_scores_is_near_half() {
    let mut r = rng(3);
    let n = 4000;
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((a - 0.5).abs() < 3.0 / (n as f64).sqrt(), "{a}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn auc_is_invariant_to_monotone_transforms(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..40)) {
        let mut labels: Vec<bool> = raw.iter().map(|x| x.1).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = raw.iter().map(|x| x.0 as f64 / 20.0).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let (a, b) = (auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn image_level_metrics_at_threshold() {
    let scores = [0.9, 0.8, 0.4, 0.3, 0.1];
    let labels = [true, false, true, false, false];
    let m = image_level_metrics(&scores, &labels, 0.5).unwrap();
    assert_eq!(m.accuracy, Some(0.6));
    assert_eq!((m.precision, m.recall), (0.5, 0.5));
    assert!((m.auc.unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass(_))));
    assert_eq!(auc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
}
