use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmac_core::retrieval::{
    average_precision_at_k, build_index, evaluate, map_at_k, nar, nar_from_ranks, EvalOptions,
    GroundTruth,
};
use rmac_core::tensor_io::{normalize_in_place, DescriptorSet};

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn rel(v: &[&str]) -> BTreeSet<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Sort the whole gallery by (distance, id) in f64.
fn full_sort(set: &DescriptorSet, q: &[f32]) -> Vec<(f64, String)> {
    let mut all: Vec<(f64, String)> = set
        .iter()
        .map(|(id, v)| {
            (
                v.iter()
                    .zip(q)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>(),
                id.to_owned(),
            )
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    all
}

#[test]
fn worked_examples() {
    // n = 10, two relevant at ranks 9 and 10
    assert!((nar_from_ranks(&[9, 10], 10).unwrap() - 0.8).abs() < 1e-9);
    let ranking: Vec<String> = (1..=10).map(|i| format!("x{i}")).collect();
    assert!((nar(&ranking, &rel(&["x9", "x10"]), 10).unwrap() - 0.8).abs() < 1e-9);

    // two relevant at ranks 1 and 3, K = 100
    let ranking = ids(&["r1", "n", "r2", "m"]);
    let ap = average_precision_at_k(&ranking, &rel(&["r1", "r2"]), 100);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
    assert!((ap - 0.8333).abs() < 1e-4);

    let mut gt = GroundTruth::new();
    gt.insert("q", "r1");
    gt.insert("q", "r2");
    let map = map_at_k(&[("q".to_string(), ranking)], &gt, 100).unwrap();
    assert!((map - ap).abs() < 1e-12);
}

#[test]
fn perfect_and_reversed_rankings() {
    assert_eq!(nar_from_ranks(&[1, 2, 3], 50).unwrap(), 0.0);
    let n = 40;
    let worst = nar_from_ranks(&[38, 39, 40], n).unwrap();
    assert!((worst - (117.0 - 6.0) / 120.0).abs() < 1e-12);
    let ranking = ids(&["a", "b", "c"]);
    assert_eq!(
        average_precision_at_k(&ranking, &rel(&["a", "b"]), 100),
        1.0
    );
    assert_eq!(average_precision_at_k(&ranking, &rel(&["z"]), 100), 0.0);
}

#[test]
fn search_matches_full_sort_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dim = 8;
    let mut names: Vec<String> = (0..10_000)
        .map(|i| format!("id{:05}", (i * 7919) % 10_000))
        .collect();
    names.shuffle(&mut rng);
    let mut set = DescriptorSet::with_capacity(dim, names.len());
    for name in &names {
        // four components of +-0.5: unit norm, squared distances exact in f32
        let mut v = vec![0.0f32; dim];
        let mut slots: Vec<usize> = (0..dim).collect();
        slots.shuffle(&mut rng);
        for &s in &slots[..4] {
            v[s] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
        }
        set.push(name.clone(), &v).unwrap();
    }
    let index = build_index(set.clone()).unwrap();
    for qi in 0..25 {
        let q = set.get(qi * 37).to_vec();
        let want = full_sort(&set, &q);
        let hits = index.search(&q, 300).unwrap();
        let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        let expect: Vec<&str> = want.iter().take(300).map(|w| w.1.as_str()).collect();
        assert_eq!(got, expect);
        let pos: Vec<usize> = (0..4).map(|t| t * 1000 + qi).collect();
        let ranks = index.ranks_of(&q, &pos, None).unwrap();
        for (&p, r) in pos.iter().zip(ranks) {
            let id = &set.ids()[p];
            assert_eq!(want.iter().position(|w| &w.1 == id).unwrap() + 1, r);
        }
    }
}

#[test]
fn search_matches_full_sort_continuous() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dim = 32;
    let mut set = DescriptorSet::with_capacity(dim, 10_000);
    for i in 0..10_000 {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v);
        set.push(format!("v{i}"), &v).unwrap();
    }
    let index = build_index(set.clone()).unwrap();
    let queries: Vec<Vec<f32>> = (0..20).map(|i| set.get(i * 311).to_vec()).collect();
    let batch: Vec<(&[f32], Option<usize>)> =
        queries.iter().map(|q| (q.as_slice(), None)).collect();
    let batched = index.search_batch(&batch, 100).unwrap();
    for (q, b) in queries.iter().zip(&batched) {
        let want = full_sort(&set, q);
        let single = index.search(q, 100).unwrap();
        assert_eq!(&single, b);
        for (h, w) in single.iter().zip(&want) {
            assert!(((h.distance as f64).powi(2) - w.0).abs() < 1e-5);
            if h.id != w.1 {
                // only near-equal distances may swap under f32 arithmetic
                let other = want.iter().find(|x| x.1 == h.id).unwrap();
                assert!((other.0 - w.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn evaluate_excludes_self() {
    let rows: [(&str, [f32; 2]); 4] = [
        ("a", [1.0, 0.0]),
        ("a2", [0.96, 0.28]),
        ("b", [0.0, 1.0]),
        ("c", [-1.0, 0.0]),
    ];
    let mut set = DescriptorSet::new(2);
    for (id, v) in rows {
        set.push(id, &v).unwrap();
    }
    let index = build_index(set).unwrap();
    let gt = GroundTruth::from_groups([vec!["a", "a2"]]);
    let eval = evaluate(
        &index,
        None,
        &gt,
        EvalOptions {
            topk: 10,
            exclude_self: true,
        },
    )
    .unwrap();
    assert_eq!(eval.per_query.len(), 2);
    assert_eq!(eval.nar, 0.0);
    assert_eq!(eval.map, 1.0);
    assert!(eval
        .rankings
        .iter()
        .all(|r| r.hits.iter().all(|h| h.id != r.query_id)));
    assert_eq!(eval.rankings[0].hits.len(), 3);
}

#[test]
fn map_is_non_decreasing_in_k_once_k_covers_the_relevant_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..300 {
        let n = rng.random_range(5..60);
        let mut ranking: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        ranking.shuffle(&mut rng);
        let nr = rng.random_range(1..=n.min(8));
        let relevant: BTreeSet<String> = (0..nr).map(|i| format!("d{i}")).collect();
        let mut prev = 0.0;
        for k in nr..=n + 5 {
            let ap = average_precision_at_k(&ranking, &relevant, k);
            assert!(ap >= prev - 1e-12, "AP@{k} = {ap} < {prev}");
            prev = ap;
        }
    }
    // below |relevant| the min(|relevant|, K) normalizer shrinks with K, so
    // AP@K can dip: a hit at rank 1 then a miss gives 1.0 then 0.5
    let ranking = ids(&["a", "x", "b"]);
    assert_eq!(average_precision_at_k(&ranking, &rel(&["a", "b"]), 1), 1.0);
    assert_eq!(average_precision_at_k(&ranking, &rel(&["a", "b"]), 2), 0.5);
}
