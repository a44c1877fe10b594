use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpgrec::data::{Dataset, Phase};
use wpgrec::eval::{evaluate_popularity, popularity_baseline, rank_all, rank_target, ranking_metrics, EvalOptions, RankResult};
use wpgrec::model::ModelConfig;
use wpgrec::train::{build_model, evaluate_model};

/// Position of `target` after sorting eligible items by descending score,
/// then ascending id.
fn sort_oracle(scores: &[f64], target: usize, excluded: &[bool]) -> usize {
    let mut eligible: Vec<usize> = (1..=scores.len()).filter(|&i| !excluded[i]).collect();
    eligible.sort_by(|&a, &b| scores[b - 1].partial_cmp(&scores[a - 1]).unwrap().then(a.cmp(&b)));
    eligible.iter().position(|&i| i == target).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<bool>) {
    let n = rng.random_range(1..=50);
    // Few distinct values so ties are common.
    let levels = rng.random_range(1..=8);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 1.0).collect();
    let target = rng.random_range(1..=n);
    let mut excluded: Vec<bool> = (0..=n).map(|_| rng.random_bool(0.3)).collect();
    excluded[0] = true;
    excluded[target] = false;
    (scores, target, excluded)
}

#[test]
fn rank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (scores, target, excluded) = random_instance(&mut rng);
        assert_eq!(rank_target(&scores, target, &excluded).unwrap(), sort_oracle(&scores, target, &excluded));
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let ranks: Vec<RankResult> = (0..rng.random_range(1..30)).map(|user| RankResult { user, rank: rng.random_range(0..40) }).collect();
        for k in [1, 5, 10, 20] {
            let (hr, ndcg) = ranking_metrics(&ranks, k).unwrap();
            let mut hits = 0.0;
            let mut gain = 0.0;
            for r in &ranks {
                let sorted_pos = r.rank + 1;
                if sorted_pos <= k {
                    hits += 1.0;
                    gain += 1.0 / (sorted_pos as f64 + 1.0).log2();
                }
            }
            assert!((hr - hits / ranks.len() as f64).abs() < 1e-12);
            assert!((ndcg - gain / ranks.len() as f64).abs() < 1e-12);
        }
    }
    let (_, ndcg) = ranking_metrics(&[RankResult { user: 0, rank: 9 }], 10).unwrap();
    assert!((ndcg - 1.0 / 11f64.log2()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn shift_and_excluded_scores_do_not_move_the_rank(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, target, excluded) = random_instance(&mut rng);
        let r = rank_target(&scores, target, &excluded).unwrap();
        // Integer shifts of half-integer scores are exact, so ties survive.
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift.round()).collect();
        prop_assert_eq!(rank_target(&shifted, target, &excluded).unwrap(), r);
        let mut scrambled = scores.clone();
        for (i, s) in scrambled.iter_mut().enumerate() {
            if excluded[i + 1] {
                *s = rng.random_range(-1e6..1e6);
            }
        }
        prop_assert_eq!(rank_target(&scrambled, target, &excluded).unwrap(), r);
    }

    #[test]
    fn metrics_are_monotone_in_k(ranks in prop::collection::vec(0usize..60, 1..40)) {
        let rr: Vec<RankResult> = ranks.iter().enumerate().map(|(user, &rank)| RankResult { user, rank }).collect();
        let (h10, n10) = ranking_metrics(&rr, 10).unwrap();
        let (h20, n20) = ranking_metrics(&rr, 20).unwrap();
        prop_assert!(h10 <= h20 && n10 <= n20);
        prop_assert!(n10 <= h10 && n20 <= h20);
        prop_assert!((0.0..=1.0).contains(&h20));
    }
}

fn random_dataset(num_users: usize, num_items: usize, seed: u64, heavy_head: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..num_users)
        .map(|_| {
            (0..rng.random_range(5..12))
                .map(|_| {
                    if heavy_head && rng.random_bool(0.5) {
                        1 + rng.random_range(0..5)
                    } else {
                        1 + rng.random_range(0..num_items)
                    }
                })
                .collect()
        })
        .collect();
    Dataset::from_sequences(
        (0..num_users).map(|u| format!("u{u}")).collect(),
        (1..=num_items).map(|i| format!("i{i}")).collect(),
        seqs,
        0,
    )
    .unwrap()
}

#[test]
fn oracle_scores_hit_every_target() {
    let ds = random_dataset(50, 80, 1, false);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|u| {
            let mut r = vec![0.0; 80];
            r[ds.target(u, Phase::Test) - 1] = 1.0;
            r
        })
        .collect();
    let ranks = rank_all(&ds, Phase::Test, EvalOptions::default(), |u| &rows[u]).unwrap();
    assert_eq!(ranking_metrics(&ranks, 10).unwrap(), (1.0, 1.0));
}

#[test]
fn random_model_hits_at_chance_rate() {
    let num_items = 1000;
    let cfg = ModelConfig {
        d: 8,
        level: 1,
        max_len: 12,
        ..ModelConfig::default()
    };
    let mut hr = 0.0;
    let seeds = 20;
    let mut expected = 0.0;
    for seed in 0..seeds {
        let ds = random_dataset(100, num_items, 100 + seed, false);
        let model = build_model(&ModelConfig { seed, ..cfg.clone() }, &ds).unwrap();
        let store = model.init_params().unwrap();
        let r = evaluate_model(&model, &store, &ds, Phase::Test, &[10], EvalOptions::default(), "").unwrap();
        hr += r.hr(10);
        let mut mask = Vec::new();
        expected += (0..100)
            .map(|u| {
                wpgrec::eval::exclusion_mask(&ds, u, Phase::Test, EvalOptions::default(), &mut mask);
                10.0 / mask[1..].iter().filter(|&&m| !m).count() as f64
            })
            .sum::<f64>()
            / 100.0;
    }
    let (hr, expected) = (hr / seeds as f64, expected / seeds as f64);
    // 2000 ranked targets: the standard error of the mean is about 0.0022.
    assert!((hr - expected).abs() < 0.0075, "HR@10 {hr} vs {expected}");
}

#[test]
fn popularity_counts_training_interactions() {
    let ds = Dataset::from_sequences(
        vec!["a".into(), "b".into()],
        (1..=6).map(|i| i.to_string()).collect(),
        vec![vec![1, 2, 1, 3, 4, 5], vec![1, 3, 2, 6]],
        0,
    )
    .unwrap();
    // Training interactions: a -> 1,2,1,3 and b -> 1,3.
    assert_eq!(popularity_baseline(&ds), vec![3.0, 1.0, 2.0, 0.0, 0.0, 0.0]);

    let heavy = random_dataset(300, 200, 3, true);
    let pop = evaluate_popularity(&heavy, Phase::Test, &[10], EvalOptions::default()).unwrap();
    assert!(pop.hr(10) > 3.0 * 10.0 / 200.0, "{}", pop.hr(10));
}

#[test]
fn test_phase_can_keep_the_validation_item() {
    let ds = Dataset::from_sequences(vec!["a".into()], (1..=5).map(|i| i.to_string()).collect(), vec![vec![1, 2, 3, 4, 5]], 0).unwrap();
    let scores = [0.0, 0.0, 0.0, 9.0, 1.0];
    let strict = rank_all(&ds, Phase::Test, EvalOptions::default(), |_| &scores).unwrap();
    assert_eq!(strict[0].rank, 0);
    let loose = rank_all(&ds, Phase::Test, EvalOptions { exclude_valid_at_test: false }, |_| &scores).unwrap();
    assert_eq!(loose[0].rank, 1);
}
