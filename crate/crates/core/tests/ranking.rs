mod common;

use std::collections::HashSet;

use cirloop::gallery::EmbeddingVector;
use cirloop::ranker::{fuse_history, rank_gallery, select_next_reference, NextRefPolicy, Ranking};
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn ids(r: &Ranking) -> Vec<String> {
    r.ids().map(str::to_string).collect()
}

#[test]
fn matches_naive_sort_with_ties() {
    let mut r = rng(77);
    for trial in 0..100 {
        let n = r.random_range(1..=1000);
        let d = r.random_range(2..=24);
        let g = gallery_with_ties(trial, n, d);
        let query = EmbeddingVector::new(random_unit(&mut r, d)).unwrap();
        let excluded: Vec<String> = (0..3).map(|_| g.entries()[r.random_range(0..n)].image_id.clone()).collect();
        let excluded_set: HashSet<String> = excluded.iter().cloned().collect();
        let brute = naive_rank(query.as_slice(), &g, &excluded.iter().map(String::as_str).collect::<Vec<_>>());
        match rank_gallery(&query, &g, &excluded_set) {
            Ok(ranking) => {
                let got: Vec<(String, f64)> = ranking.items.iter().map(|s| (s.image_id.clone(), s.score)).collect();
                assert_eq!(got, brute, "trial {trial}");
            }
            Err(_) => assert!(brute.is_empty()),
        }
    }
}

#[test]
fn parallel_path_matches_naive() {
    let g = gallery_with_ties(5, 6000, 8);
    let mut r = rng(1);
    let q = EmbeddingVector::new(random_unit(&mut r, 8)).unwrap();
    let ranking = rank_gallery(&q, &g, &HashSet::new()).unwrap();
    let brute = naive_rank(q.as_slice(), &g, &[]);
    assert_eq!(ids(&ranking), brute.iter().map(|b| b.0.clone()).collect::<Vec<_>>());
}

#[test]
fn fusion_of_orthogonal_pair() {
    let h = [
        EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
        EmbeddingVector::new(vec![0.0, 1.0]).unwrap(),
    ];
    let fused = fuse_history(&h).unwrap();
    let half = std::f64::consts::FRAC_1_SQRT_2;
    for &x in fused.vector.as_slice() {
        assert!((f64::from(x) - half).abs() < 1e-6);
    }
}

#[test]
fn scale_invariance() {
    for seed in 0..20 {
        let g = gallery_with_ties(seed, 300, 6);
        let mut r = rng(seed + 1000);
        let q = EmbeddingVector::new(random_unit(&mut r, 6)).unwrap();
        let base = ids(&rank_gallery(&q, &g, &HashSet::new()).unwrap());
        for lambda in [1e-3f32, 1.0, 1e3] {
            let scaled = rank_gallery(&q.scaled(lambda), &g, &HashSet::new()).unwrap();
            assert_eq!(ids(&scaled), base, "lambda {lambda}");
        }
    }
}

#[test]
fn next_reference_policies() {
    let g = random_gallery(3, 40, 5);
    let mut r = rng(3);
    let q = EmbeddingVector::new(random_unit(&mut r, 5)).unwrap();
    let ranking = rank_gallery(&q, &g, &HashSet::new()).unwrap();
    let order = ids(&ranking);
    assert_eq!(select_next_reference(&ranking, NextRefPolicy::Top1, 0, "s", 1).unwrap(), order[0]);
    assert_eq!(select_next_reference(&ranking, NextRefPolicy::Fixed(3), 0, "s", 1).unwrap(), order[2]);
    let a = select_next_reference(&ranking, NextRefPolicy::RandomTop(10), 42, "s", 2).unwrap();
    let b = select_next_reference(&ranking, NextRefPolicy::RandomTop(10), 42, "s", 2).unwrap();
    assert_eq!(a, b);
    assert!(order[..10].iter().any(|id| id == a));
    let picks: HashSet<&str> = (0..200u64)
        .map(|seed| select_next_reference(&ranking, NextRefPolicy::RandomTop(10), seed, "s", 2).unwrap())
        .collect();
    assert!(picks.len() > 5);
    assert!(picks.iter().all(|p| order[..10].iter().any(|id| id == p)));
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn ranking_is_a_sorted_permutation(seed in 0u64..10_000, n in 1usize..200, q in unit_vec(6)) {
        let g = gallery_with_ties(seed, n, 6);
        let query = cirloop::gallery::normalize(&EmbeddingVector::new(q).unwrap()).unwrap();
        let ranking = rank_gallery(&query, &g, &HashSet::new()).unwrap();
        prop_assert_eq!(ranking.len(), n);
        let seen: HashSet<&str> = ranking.ids().collect();
        prop_assert_eq!(seen.len(), n);
        for w in ranking.items.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].image_id < w[1].image_id));
        }
    }

    #[test]
    fn duplicate_history_entries_commute(a in unit_vec(5), b in unit_vec(5)) {
        let a = cirloop::gallery::normalize(&EmbeddingVector::new(a).unwrap()).unwrap();
        let b = cirloop::gallery::normalize(&EmbeddingVector::new(b).unwrap()).unwrap();
        let x = fuse_history(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let y = fuse_history(&[a.clone(), a.clone(), b.clone()]).unwrap();
        for (p, q) in x.vector.as_slice().iter().zip(y.vector.as_slice()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
        prop_assert!(x.vector.is_unit());
    }
}
