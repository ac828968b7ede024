use akt::error::Error;
use akt::metrics::{
    counting_metrics, localization_metrics, paired_spacing, principal_axis, px_to_cm, row_axis, spacing_accuracy,
    spacing_estimate, threshold_matches, Counts, LocalizationAccumulator, MetricConfig,
};
use akt::synthfield::Point;
use proptest::prelude::*;

fn cfg() -> MetricConfig {
    MetricConfig::default()
}

#[test]
fn default_config_is_valid() {
    let c = cfg();
    assert_eq!(c.thresholds, (1..=10).collect::<Vec<u32>>());
    assert_eq!(c.gsd_mm, 2.38);
    c.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    for thresholds in [vec![], vec![0, 1], vec![3, 2], vec![1, 1]] {
        let c = MetricConfig { thresholds, ..cfg() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let c = MetricConfig { gsd_mm: 0.0, ..cfg() };
    assert!(c.validate().is_err());
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let gt = [[5.0, 5.0], [40.0, 12.0], [80.0, 90.0]];
    let r = localization_metrics(&gt, &gt, &cfg());
    assert_eq!((r.avp, r.avr, r.avf), (1.0, 1.0, 1.0));
    assert!(r.per_alpha.iter().all(|s| s.counts == Counts { tp: 3, fp: 0, fn_: 0 }));
}

#[test]
fn empty_predictions_give_zeros() {
    let r = localization_metrics(&[], &[[1.0, 1.0]], &cfg());
    assert_eq!((r.avp, r.avr, r.avf), (0.0, 0.0, 0.0));
    assert_eq!(r.at(1).unwrap().counts, Counts { tp: 0, fp: 0, fn_: 1 });
}

#[test]
fn worked_two_point_example() {
    let gt = [[0.0, 0.0], [10.0, 0.0]];
    let pred = [[0.0, 3.0], [100.0, 100.0]];
    let r = localization_metrics(&pred, &gt, &cfg());
    let s = r.at(3).unwrap();
    assert_eq!(s.counts, Counts { tp: 1, fp: 1, fn_: 1 });
    assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    assert_eq!(r.at(2).unwrap().counts.tp, 0);
    // Zero at α = 1, 2 and one half at α = 3..10.
    assert!((r.avf - 0.4).abs() < 1e-15);
}

#[test]
fn one_to_one_matching_beats_greedy() {
    // Greedy nearest-first would give pred 0 to gt 0 and leave gt 1 alone.
    let gt = [[0.0, 0.0], [4.0, 0.0]];
    let pred = [[2.0, 0.0], [-2.5, 0.0]];
    assert_eq!(threshold_matches(&pred, &gt, 3.0).len(), 2);
}

#[test]
fn more_ground_truth_than_predictions() {
    let gt = [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]];
    let pred = [[20.5, 0.0]];
    assert_eq!(threshold_matches(&pred, &gt, 1.0), vec![(2, 0)]);
}

#[test]
fn accumulator_pools_counts_over_images() {
    let mut acc = LocalizationAccumulator::new(&cfg());
    acc.add(&[[0.0, 0.0]], &[[0.0, 0.0]]);
    acc.add(&[[50.0, 50.0], [0.0, 0.0]], &[[0.0, 0.0]]);
    let s = acc.report().at(5).unwrap().clone();
    assert_eq!(s.counts, Counts { tp: 2, fp: 1, fn_: 0 });
    assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn counting_examples() {
    let r = counting_metrics(&[4.0, 7.0], &[4.0, 7.0]).unwrap();
    assert_eq!((r.mae, r.mse), (0.0, 0.0));
    let r = counting_metrics(&[3.0, 1.0], &[2.0, 2.0]).unwrap();
    assert_eq!((r.mae, r.mse), (1.0, 1.0));
    let r = counting_metrics(&[12.0, 9.0, 1.0], &[10.0, 9.0, 5.0]).unwrap();
    assert_eq!(r.mae, 2.0);
    assert!((r.mse - 20.0 / 3.0).abs() < 1e-14);
    assert!((r.rmse - (20.0f64 / 3.0).sqrt()).abs() < 1e-14);
    assert!(matches!(counting_metrics(&[1.0], &[]), Err(Error::Dimension(_))));
}

#[test]
fn unit_conversion() {
    assert!((px_to_cm(10.0, 2.38) - 2.38).abs() < 1e-12);
    assert_eq!(px_to_cm(0.0, 2.38), 0.0);
    assert!((px_to_cm(100.0, 31.0) - 310.0).abs() < 1e-9);
}

#[test]
fn three_four_five_spacing() {
    let e = spacing_estimate(&[[0.0, 0.0], [3.0, 4.0]], 10.0, 400.0);
    assert_eq!(e.distances_px, vec![5.0]);
    assert!((e.distances_cm[0] - 5.0).abs() < 1e-12);
}

#[test]
fn uniform_row_at_63_px() {
    let pts: Vec<Point> = (0..8).map(|i| [20.0 + 63.0 * i as f64, 100.0]).collect();
    let e = spacing_estimate(&pts, 2.38, 300.0);
    assert_eq!(e.distances_cm.len(), 7);
    for d in &e.distances_cm {
        assert!((d - 14.994).abs() < 1e-9, "{d}");
    }
}

#[test]
fn two_rows_share_no_pairs() {
    let mut pts: Vec<Point> = (0..10).map(|i| [10.0 * i as f64, 0.0]).collect();
    pts.extend((0..10).map(|i| [10.0 * i as f64 + 3.0, 40.0]));
    let e = spacing_estimate(&pts, 2.38, 40.0);
    assert_eq!(e.rows.len(), 2);
    assert_eq!(e.pairs.len(), 18);
    for &(a, b) in &e.pairs {
        assert_eq!(a < 10, b < 10, "pair ({a}, {b}) crosses rows");
    }
}

#[test]
fn fewer_than_two_points_give_empty_estimate() {
    assert!(spacing_estimate(&[], 2.38, 40.0).pairs.is_empty());
    assert!(spacing_estimate(&[[1.0, 1.0]], 2.38, 40.0).pairs.is_empty());
}

#[test]
fn principal_axis_follows_a_tilted_row() {
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let pts: Vec<Point> = (0..9).map(|i| [i as f64 * c, i as f64 * s]).collect();
    let a = principal_axis(&pts);
    assert!((a[0] * c + a[1] * s).abs() > 1.0 - 1e-12);
}

#[test]
fn row_axis_ignores_wide_row_spread() {
    // Two short rows far apart: the covariance points across them.
    let mut pts: Vec<Point> = (0..4).map(|i| [60.0 * i as f64, 0.0]).collect();
    pts.extend((0..4).map(|i| [60.0 * i as f64, 400.0]));
    assert!(principal_axis(&pts)[1].abs() > 0.99);
    let a = row_axis(&pts);
    assert!(a[0].abs() > 1.0 - 1e-12);
    let e = spacing_estimate(&pts, 2.38, 400.0);
    assert_eq!(e.pairs.len(), 6);
}

#[test]
fn spacing_accuracy_examples() {
    let r = spacing_accuracy(&[14.0, 15.0, 16.5], &[14.0, 15.0, 16.5]).unwrap();
    assert_eq!((r.rmse, r.r_squared), (0.0, 1.0));

    let reference = [12.0, 14.5, 15.0, 17.0];
    let shifted: Vec<f64> = reference.iter().map(|r| r + 2.0).collect();
    let r = spacing_accuracy(&shifted, &reference).unwrap();
    assert!((r.rmse - 2.0).abs() < 1e-12);
    assert!((r.r_squared - 1.0).abs() < 1e-12);
    assert!((r.intercept - 2.0).abs() < 1e-12);

    assert!(matches!(spacing_accuracy(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    assert!(spacing_accuracy(&[1.0], &[1.0]).is_err());
}

#[test]
fn spacing_accuracy_matches_least_squares_oracle() {
    let est = [14.2, 15.1, 13.8, 16.0, 15.4];
    let reference = [14.0, 15.0, 14.5, 15.5, 15.0];
    let r = spacing_accuracy(&est, &reference).unwrap();
    assert_eq!(r.pairs, 5);
    assert!((r.slope - 1.3846153846153848).abs() < 1e-12);
    assert!((r.intercept - -5.592307692307697).abs() < 1e-11);
    assert!((r.r_squared - 0.7788461538461535).abs() < 1e-12);
    assert!((r.rmse - 0.4358898943540671).abs() < 1e-12);
}

#[test]
fn paired_spacing_uses_matched_neighbours_only() {
    let gt = [[0.0, 0.0], [60.0, 0.0], [120.0, 0.0]];
    let pred = [[1.0, 0.0], [62.0, 0.0]];
    let (est, reference) = paired_spacing(&pred, &gt, &[(0, 1), (1, 2)], 5.0);
    assert_eq!(est, vec![61.0]);
    assert_eq!(reference, vec![60.0]);
}

fn points() -> impl Strategy<Value = Vec<Point>> {
    proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0).prop_map(|(x, y)| [x, y]), 0..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_grow_with_alpha(pred in points(), gt in points()) {
        let r = localization_metrics(&pred, &gt, &cfg());
        for w in r.per_alpha.windows(2) {
            prop_assert!(w[1].precision >= w[0].precision);
            prop_assert!(w[1].recall >= w[0].recall);
            prop_assert!(w[1].f1 >= w[0].f1);
        }
    }

    #[test]
    fn relabeling_leaves_scores_unchanged(pred in points(), gt in points(), shift in 0usize..9) {
        let base = localization_metrics(&pred, &gt, &cfg());
        let mut p2 = pred.clone();
        p2.reverse();
        let mut g2 = gt.clone();
        if !g2.is_empty() {
            let k = shift % g2.len();
            g2.rotate_left(k);
        }
        prop_assert_eq!(base, localization_metrics(&p2, &g2, &cfg()));
    }

    #[test]
    fn mae_is_at_most_root_mse(
        pairs in proptest::collection::vec((0.0f64..300.0, 0.0f64..300.0), 1..40)
    ) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = counting_metrics(&p, &g).unwrap();
        prop_assert!(r.mae <= r.rmse * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn perfect_grid_yields_every_in_row_pair(
        rows in 1usize..4,
        plants in 2usize..16,
        ratio in 3.0f64..8.0,
        gap in 20.0f64..60.0,
        angle in -1.5f64..1.5,
    ) {
        let row_gap = ratio * gap;
        let (c, s) = (angle.cos(), angle.sin());
        let mut pts = Vec::new();
        for r in 0..rows {
            for p in 0..plants {
                let (u, v) = (p as f64 * gap, r as f64 * row_gap);
                pts.push([500.0 + u * c - v * s, 500.0 + u * s + v * c]);
            }
        }
        let e = spacing_estimate(&pts, 2.38, row_gap);
        prop_assert_eq!(e.rows.len(), rows);
        prop_assert_eq!(e.pairs.len(), (plants - 1) * rows);
        for d in &e.distances_px {
            prop_assert!((d - gap).abs() < 1e-9);
        }
    }
}
