mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_basket, random_config, tiny_config};
use npa::recommend::{recommend_topk, score_fesf, score_mean, score_softmax, top_k, Scoring, ScoringKind};
use npa::{NpaModel, Tensor, Variant};

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, cols], 1.0, &mut rng)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn softmax_scores_match_a_direct_computation() {
    let e = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![-1.0, 0.5],
        vec![2.0, -1.0],
        vec![0.3, 0.3],
    ])
    .unwrap();
    let c = [0.4, -1.2];
    let logits: Vec<f64> = (0..5).map(|i| dot(e.row(i), &c)).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let s = score_softmax(&c, &e).unwrap();
    assert_eq!(s.kind, ScoringKind::Softmax);
    for (got, l) in s.scores.iter().zip(&logits) {
        assert!((got - l.exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn mean_of_two_contexts_averages_their_distributions() {
    let e = matrix(6, 3, 1);
    let (c1, c2) = ([0.5, -0.2, 1.0], [-1.0, 0.3, 0.1]);
    let p1 = score_softmax(&c1, &e).unwrap().scores;
    let p2 = score_softmax(&c2, &e).unwrap().scores;
    let m = score_mean(&[&c1, &c2], &e).unwrap().scores;
    for i in 0..6 {
        assert!((m[i] - 0.5 * (p1[i] + p2[i])).abs() <= 1e-12);
    }
    assert!((m.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn softmax_ignores_a_shared_logit_offset() {
    // A constant embedding column turns a context shift into a logit shift.
    let base = matrix(7, 3, 2);
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|i| {
            let mut r = base.row(i).to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let e = Tensor::from_rows(&rows).unwrap();
    let a = score_softmax(&[0.2, -0.7, 1.1, 0.0], &e).unwrap().scores;
    let b = score_softmax(&[0.2, -0.7, 1.1, 25.0], &e).unwrap().scores;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn fesf_with_one_context_ranks_like_softmax() {
    let e = matrix(30, 4, 3);
    let c = [0.9, -0.1, 0.4, -0.6];
    for t in [0.1, 1.0, 10.0] {
        let f = score_fesf(&[&c], &e, t).unwrap();
        let s = score_softmax(&c, &e).unwrap();
        assert_eq!(top_k(&f.scores, &[], 30).items, top_k(&s.scores, &[], 30).items);
        assert_eq!(f.fesf_temperature, Some(t));
    }
    assert!(score_fesf(&[&c], &e, 0.0).is_err());
}

#[test]
fn fesf_is_a_tempered_log_sum_exp() {
    let e = matrix(5, 2, 4);
    let (c1, c2) = ([1.0, 0.0], [0.0, -2.0]);
    let t = 0.5;
    let s = score_fesf(&[&c1, &c2], &e, t).unwrap().scores;
    for i in 0..5 {
        let (l1, l2) = (dot(e.row(i), &c1), dot(e.row(i), &c2));
        let expected = ((l1 / t).exp() + (l2 / t).exp()).ln();
        assert!((s[i] - expected).abs() <= 1e-12);
    }
}

#[test]
fn top_k_breaks_ties_by_id() {
    let r = top_k(&[1.0, 3.0, 3.0, 0.5, 3.0], &[2], 3);
    assert_eq!(r.items, vec![1, 4, 0]);
    assert_eq!(r.scores, vec![3.0, 3.0, 1.0]);
}

#[test]
fn largest_k_is_a_full_ranking_of_the_rest() {
    let m = NpaModel::new(tiny_config(Variant::Sc), 1).unwrap();
    let basket = [3, 1, 2, 1];
    let r = recommend_topk(&m, &basket, 17, Scoring::default(), 0).unwrap();
    let mut items = r.items.clone();
    items.sort_unstable();
    let expected: Vec<usize> = (0..20).filter(|i| ![1, 2, 3].contains(i)).collect();
    assert_eq!(items, expected);
    assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(recommend_topk(&m, &basket, 18, Scoring::default(), 0).is_err());
    assert!(recommend_topk(&m, &basket, 0, Scoring::default(), 0).is_err());
    assert!(recommend_topk(&m, &[], 5, Scoring::default(), 0).is_err());
}

#[test]
fn recommendations_never_contain_basket_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let models: Vec<NpaModel> = (0..10)
        .map(|s| NpaModel::new(random_config(&mut rng), s).unwrap())
        .collect();
    for trial in 0..1000 {
        let m = &models[trial % models.len()];
        let cfg = m.config();
        let basket = random_basket(&mut rng, cfg.num_items, cfg.max_sequence_length.min(cfg.num_items - 1));
        let mut distinct = basket.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let k = rng.random_range(1..=cfg.num_items - distinct.len());
        let scoring = match trial % 3 {
            0 if cfg.variant == Variant::Sc => Scoring::default(),
            0 | 1 => Scoring::fesf(0.5),
            _ => Scoring {
                kind: ScoringKind::MeanAggregate,
                fesf_temperature: 1.0,
            },
        };
        let r = recommend_topk(m, &basket, k, scoring, trial as u64).unwrap();
        assert_eq!(r.items.len(), k);
        assert!(r.items.iter().all(|i| !basket.contains(i)));
    }
}

#[test]
fn recommendation_is_deterministic() {
    let m = NpaModel::new(tiny_config(Variant::Mc), 2).unwrap();
    let a = recommend_topk(&m, &[4, 9], 5, Scoring::fesf(1.0), 11).unwrap();
    let b = recommend_topk(&m, &[4, 9], 5, Scoring::fesf(1.0), 11).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn top_k_is_sorted_and_excludes(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let exclude: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        let k = rng.random_range(0..=n);
        let r = top_k(&scores, &exclude, k);
        prop_assert_eq!(r.items.len(), k.min(n - exclude.len()));
        prop_assert!(r.items.iter().all(|i| !exclude.contains(i)));
        prop_assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        if let Some(&worst) = r.scores.last() {
            let better_left = (0..n)
                .filter(|i| !exclude.contains(i) && !r.items.contains(i))
                .all(|i| scores[i] <= worst);
            prop_assert!(better_left);
        }
    }
}
