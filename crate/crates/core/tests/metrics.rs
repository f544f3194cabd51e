mod common;

use std::collections::HashSet;

use cirloop::engine::{self, EvalConfig, GallerySet};
use cirloop::metrics::{
    self, average_precision, diff_reports, hits_at_k_ranks, rank_stats_points, recall_at_k_ranks, Metric, RankPoint,
};
use cirloop::simulator::Simulator;
use proptest::prelude::*;

use common::*;

fn hand_built() -> Vec<Vec<usize>> {
    vec![
        vec![7, 3, 1],
        vec![1],
        vec![60, 55, 40, 12, 9],
        vec![2, 2],
        vec![11, 10, 9, 8, 7],
        vec![100, 1],
        vec![5, 6, 7, 8, 9],
        vec![50, 50, 50, 50, 50],
        vec![51, 49, 51, 49, 51],
        vec![3],
        vec![4, 4, 4, 4, 4],
        vec![20, 10, 5, 1],
        vec![6, 5],
        vec![999, 998, 997, 996, 1],
        vec![10, 11, 12, 13, 14],
        vec![1, 2, 3, 4, 5],
        vec![30, 20, 10, 6, 5],
        vec![2],
        vec![45, 1],
        vec![8, 7, 6, 5, 4],
    ]
}

#[test]
fn twenty_hand_built_traces_match_enumeration() {
    let ranks = hand_built();
    for k in [1, 5, 10, 50] {
        for r in 1..=5 {
            assert_eq!(hits_at_k_ranks(&ranks, k, r).unwrap(), oracle_hits(&ranks, k, r), "hits k={k} r={r}");
            assert_eq!(recall_at_k_ranks(&ranks, k, r).unwrap(), oracle_recall(&ranks, k, r), "recall k={k} r={r}");
        }
    }
    // Spot values counted by hand.
    assert_eq!(hits_at_k_ranks(&ranks, 1, 1).unwrap(), 10.0);
    assert_eq!(hits_at_k_ranks(&ranks, 5, 5).unwrap(), 75.0);
    let pts: Vec<Vec<RankPoint>> = ranks
        .iter()
        .map(|s| s.iter().map(|&rank| RankPoint { rank, absent: false }).collect())
        .collect();
    let first: Vec<usize> = ranks.iter().map(|s| s[0]).collect();
    let stats = rank_stats_points(&pts, 1).unwrap();
    assert_eq!(stats.mean, first.iter().sum::<usize>() as f64 / 20.0);
    let mut sorted = first.clone();
    sorted.sort();
    assert_eq!(stats.median, (sorted[9] + sorted[10]) as f64 / 2.0);
}

#[test]
fn map_hand_cases() {
    let gt: HashSet<&str> = ["a", "d"].into();
    assert_eq!(100.0 * average_precision(&["a", "b", "c", "d", "e"], &gt, 5), 75.0);
    let one: HashSet<&str> = ["a"].into();
    assert_eq!(100.0 * average_precision(&["a", "b"], &one, 5), 100.0);
    assert_eq!(average_precision(&["b", "c"], &one, 5), 0.0);
}

#[test]
fn rank_stats_layout_for_large_ranks() {
    let pts = vec![
        vec![RankPoint { rank: 189, absent: false }, RankPoint { rank: 4, absent: false }],
        vec![RankPoint { rank: 191, absent: false }, RankPoint { rank: 5, absent: false }],
    ];
    let initial = rank_stats_points(&pts, 1).unwrap();
    let last = rank_stats_points(&pts, 2).unwrap();
    assert_eq!(format!("{:.2} -> {:.2}", initial.mean, last.mean), "190.00 -> 4.50");
}

#[test]
fn report_cells_match_brute_force() {
    let g = random_gallery(8, 100, 8);
    let triplets = random_triplets(8, 50, 100);
    let run = engine::run_batch(
        &triplets,
        &GallerySet::single(g),
        &EvalConfig::default(),
        &toy(2, 0.5),
        Some(&Simulator::Oracle { alpha: 0.25 }),
        3,
    )
    .unwrap();
    let report = metrics::make_report(&run, &[1, 5, 10, 50], &[1, 3, 5]).unwrap();
    let ranks: Vec<Vec<usize>> = run.traces.iter().map(|t| t.target_ranks()).collect();
    for k in [1, 5, 10, 50] {
        for r in [1, 3, 5] {
            assert_eq!(report.get("all", Metric::Hits, Some(k), Some(r)).unwrap(), oracle_hits(&ranks, k, r));
            assert_eq!(report.get("all", Metric::Recall, Some(k), Some(r)).unwrap(), oracle_recall(&ranks, k, r));
        }
        // Single target: AP@K is 1/rank when the rank is within K.
        for r in [1, 3, 5] {
            let expected = 100.0
                * ranks
                    .iter()
                    .map(|s| {
                        let rank = s[r.min(s.len()) - 1];
                        if rank <= k { 1.0 / rank as f64 } else { 0.0 }
                    })
                    .sum::<f64>()
                / ranks.len() as f64;
            let got = report.get("all", Metric::Map, Some(k), Some(r)).unwrap();
            assert!((got - expected).abs() < 1e-9, "map k={k} r={r}: {got} vs {expected}");
        }
    }
    assert!(report.map_formula.contains("min(K"));
}

#[test]
fn map_requires_enough_candidates() {
    let g = random_gallery(3, 30, 4);
    let config = EvalConfig { m: 3, ..EvalConfig::default() };
    let run = engine::run_batch(
        &random_triplets(1, 3, 30),
        &GallerySet::single(g),
        &config,
        &toy(0, 0.5),
        Some(&Simulator::Oracle { alpha: 0.5 }),
        1,
    )
    .unwrap();
    assert!(metrics::map_at_k(&run.traces, 5, 1).is_err());
    let report = metrics::make_report(&run, &[1, 5], &[1]).unwrap();
    assert!(report.get("all", Metric::Map, Some(5), Some(1)).is_none());
    assert!(!report.warnings.is_empty());
}

#[test]
fn report_diff_semantics() {
    let a = metrics::make_report_from_traces(&[], None, 0, &[1, 5], &[1, 2]).unwrap();
    assert!(diff_reports(&a, &a, 0.0).unwrap().is_empty());
    let mut b = a.clone();
    b.cells[0].value += 0.5;
    assert_eq!(diff_reports(&a, &b, 0.01).unwrap().len(), 1);
    assert!(diff_reports(&a, &b, 1.0).unwrap().is_empty());
    let mut c = a.clone();
    c.cells.pop();
    assert_eq!(diff_reports(&a, &c, 0.0).unwrap().len(), 1);
    let mut d = a.clone();
    d.schema = "other/2".into();
    assert!(diff_reports(&a, &d, 0.0).is_err());
}

proptest! {
    #[test]
    fn round_one_hits_equal_recall(ranks in prop::collection::vec(prop::collection::vec(1usize..200, 1..6), 0..40)) {
        for k in [1, 5, 10, 50] {
            prop_assert_eq!(hits_at_k_ranks(&ranks, k, 1).unwrap(), recall_at_k_ranks(&ranks, k, 1).unwrap());
        }
    }

    #[test]
    fn hits_monotone(ranks in prop::collection::vec(prop::collection::vec(1usize..200, 1..6), 1..40)) {
        for k in 1..60 {
            for r in 1..=5 {
                let h = hits_at_k_ranks(&ranks, k, r).unwrap();
                prop_assert!(h <= hits_at_k_ranks(&ranks, k, r + 1).unwrap());
                prop_assert!(h <= hits_at_k_ranks(&ranks, k + 1, r).unwrap());
                prop_assert!((0.0..=100.0).contains(&h));
                prop_assert_eq!(h, oracle_hits(&ranks, k, r));
            }
        }
    }

    #[test]
    fn ap_is_perfect_exactly_when_targets_lead(
        n_targets in 1usize..5,
        k in 1usize..8,
        order in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<usize> = (0..10).collect();
            for i in (1..v.len()).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            v
        }),
    ) {
        let ids: Vec<String> = order.iter().map(|i| format!("x{i}")).collect();
        let targets: HashSet<&str> = (0..n_targets).map(|i| ids.iter().find(|s| **s == format!("x{i}")).unwrap().as_str()).collect();
        let ap = average_precision(&ids, &targets, k);
        let lead = k.min(n_targets);
        let leads = ids[..lead].iter().all(|id| targets.contains(id.as_str()));
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(ap == 1.0, leads);
    }
}
