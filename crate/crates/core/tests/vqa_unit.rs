use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use npa::tensor::softmax;
use npa::vqa::{
    aggregate_attention, estimate_context, extract_pattern, pattern_attention, project_items,
    Codebook, ExtractionStrategy, StepMask, VqaParams, VqaUnit,
};
use npa::{Graph, NpaError, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params(d_in: usize, head: usize, patterns: usize, seed: u64) -> VqaParams {
    VqaParams::random(d_in, head, patterns, &mut rng(seed))
}

fn items(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], 1.0, &mut rng(seed))
}

/// Row-vector product `x · w` without the tensor engine.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identity_query_projection_returns_items() {
    let mut p = params(4, 4, 3, 1);
    p.w_q = Tensor::identity(4);
    let x = items(3, 4, 2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = p.register(&mut g);
    let (q, k, v) = project_items(&mut g, xv, &vars).unwrap();
    assert_eq!(g.value(q), &x);
    assert_eq!(g.shape(k), &[3, 4]);
    assert_eq!(g.shape(v), &[3, 4]);
}

#[test]
fn single_item_gives_single_rows() {
    let p = params(5, 3, 4, 3);
    let mut g = Graph::new();
    let xv = g.constant(items(1, 5, 4));
    let vars = p.register(&mut g);
    let (q, k, v) = project_items(&mut g, xv, &vars).unwrap();
    for t in [q, k, v] {
        assert_eq!(g.shape(t), &[1, 3]);
    }
}

#[test]
fn projections_match_direct_products() {
    let p = params(4, 3, 5, 5);
    let x = items(3, 4, 6);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = p.register(&mut g);
    let (q, k, v) = project_items(&mut g, xv, &vars).unwrap();
    for (out, w) in [(q, &p.w_q), (k, &p.w_k), (v, &p.w_v)] {
        for r in 0..3 {
            assert!(close(g.value(out).row(r), &vecmat(x.row(r), w), 1e-12));
        }
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let unit = VqaUnit::new(params(4, 3, 2, 7));
    let err = unit
        .evaluate(&items(2, 5, 8), &StepMask::single(&[true, true]), ExtractionStrategy::greedy(), 0)
        .unwrap_err();
    assert!(matches!(err, NpaError::Shape { .. }));
}

#[test]
fn one_entry_codebook_gives_certain_attention() {
    let unit = VqaUnit::new(params(4, 4, 1, 9));
    let out = unit
        .evaluate(&items(3, 4, 10), &StepMask::single(&[true; 3]), ExtractionStrategy::weighted_average(), 0)
        .unwrap();
    assert_eq!(out.belief.per_item_attention.data(), &[1.0, 1.0, 1.0]);
    assert_eq!(out.belief.basket_attention.data(), &[1.0]);
}

#[test]
fn orthogonal_query_gives_uniform_attention() {
    // Pattern keys only span the first coordinate; the query has none of it.
    let mut p = params(2, 2, 3, 11);
    p.w_q = Tensor::identity(2);
    p.w_pattern_key = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let mut g = Graph::new();
    let vars = p.register(&mut g);
    let q = g.constant(Tensor::row_vector(&[0.0, 1.3]));
    let a = pattern_attention(&mut g, q, &vars).unwrap();
    assert!(close(g.value(a).data(), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn pattern_attention_matches_softmax_oracle() {
    let p = params(3, 3, 4, 12);
    let x = items(2, 3, 13);
    let unit = VqaUnit::new(p.clone());
    let out = unit
        .evaluate(&x, &StepMask::single(&[true, true]), ExtractionStrategy::weighted_average(), 0)
        .unwrap();
    let keys: Vec<Vec<f64>> = (0..4).map(|i| vecmat(p.codebook.entries().row(i), &p.w_pattern_key)).collect();
    for j in 0..2 {
        let q = vecmat(x.row(j), &p.w_q);
        let logits: Vec<f64> = keys.iter().map(|k| dot(&q, k) / 3f64.sqrt()).collect();
        assert!(close(out.belief.per_item_attention.row(j), &softmax(&logits), 1e-12));
    }
}

fn aggregate(rows: &[Vec<f64>], mask: &StepMask) -> npa::Result<Vec<f64>> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(rows).unwrap());
    let m = aggregate_attention(&mut g, a, mask)?;
    Ok(g.value(m).data().to_vec())
}

#[test]
fn aggregate_examples() {
    let rows = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
    assert_eq!(aggregate(&rows, &StepMask::single(&[false, true])).unwrap(), vec![0.6, 0.4]);
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(aggregate(&rows, &StepMask::single(&[true, true])).unwrap(), vec![0.5, 0.5]);
    let err = aggregate(&rows, &StepMask::single(&[false, false])).unwrap_err();
    assert_eq!(err.to_string(), "empty basket prefix");
}

#[test]
fn aggregate_is_bit_exact_under_shuffles() {
    let mut r = rng(14);
    for _ in 0..200 {
        let n = 7;
        let raw = items(n, 5, rand::Rng::random(&mut r));
        let rows: Vec<Vec<f64>> = (0..n).map(|i| softmax(raw.row(i))).collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut r);
        let mask = StepMask::single(&[true; 7]);
        assert_eq!(aggregate(&rows, &mask).unwrap(), aggregate(&shuffled, &mask).unwrap());
    }
}

fn extract(abar: &[f64], codebook: &Tensor, strategy: ExtractionStrategy, seed: u64) -> (Vec<f64>, Option<Vec<usize>>) {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(abar));
    let z = g.constant(codebook.clone());
    let (pat, chosen) = extract_pattern(&mut g, a, z, strategy, &mut rng(seed)).unwrap();
    (g.value(pat).data().to_vec(), chosen)
}

#[test]
fn one_hot_belief_agrees_across_strategies() {
    let z = items(4, 3, 15);
    let abar = [0.0, 0.0, 1.0, 0.0];
    for s in [
        ExtractionStrategy::greedy(),
        ExtractionStrategy::weighted_average(),
        ExtractionStrategy::sampling(1.0).unwrap(),
        ExtractionStrategy::sampling(0.3).unwrap(),
    ] {
        for seed in 0..20 {
            assert_eq!(extract(&abar, &z, s, seed).0, z.row(2), "{s:?}");
        }
    }
}

#[test]
fn greedy_takes_the_argmax_row() {
    let z = items(3, 2, 16);
    let (row, chosen) = extract(&[0.1, 0.7, 0.2], &z, ExtractionStrategy::greedy(), 0);
    assert_eq!(row, z.row(1));
    assert_eq!(chosen, Some(vec![1]));
}

#[test]
fn weighted_average_is_the_expected_row() {
    let z = items(3, 2, 17);
    let abar = [0.1, 0.7, 0.2];
    let (row, _) = extract(&abar, &z, ExtractionStrategy::weighted_average(), 0);
    let expect: Vec<f64> = (0..2).map(|c| (0..3).map(|i| abar[i] * z.get(i, c)).sum()).collect();
    assert!(close(&row, &expect, 1e-15));
}

#[test]
fn gumbel_sampling_matches_the_categorical() {
    let z = items(2, 2, 18);
    let s = ExtractionStrategy::sampling(1.0).unwrap();
    let n = 10_000;
    let ones = (0..n).filter(|&seed| extract(&[0.5, 0.5], &z, s, seed).1 == Some(vec![1])).count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    assert_eq!(extract(&[0.5, 0.5], &z, s, 42), extract(&[0.5, 0.5], &z, s, 42));
    assert!(ExtractionStrategy::sampling(0.0).is_err());
}

fn context(p: &VqaParams, x: &Tensor, z: &[f64], mask: &[bool]) -> npa::Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = p.register(&mut g);
    let xv = g.constant(x.clone());
    let (_, k, v) = project_items(&mut g, xv, &vars)?;
    let zv = g.constant(Tensor::row_vector(z));
    let (b, c) = estimate_context(&mut g, zv, k, v, vars.w_context_query, &StepMask::single(mask))?;
    Ok((g.value(b).data().to_vec(), g.value(c).data().to_vec()))
}

#[test]
fn single_visible_item_returns_its_value() {
    let p = params(4, 3, 2, 19);
    let x = items(3, 4, 20);
    let (b, c) = context(&p, &x, &[0.3, -0.2, 0.9], &[false, true, false]).unwrap();
    assert_eq!(b, vec![0.0, 1.0, 0.0]);
    assert!(close(&c, &vecmat(x.row(1), &p.w_v), 1e-15));
}

#[test]
fn identical_keys_average_the_values() {
    let mut p = params(2, 2, 2, 21);
    p.w_k = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
    p.w_v = Tensor::identity(2);
    // Both items share the first coordinate, so their keys coincide.
    let x = Tensor::from_rows(&[vec![0.7, 1.0], vec![0.7, -3.0]]).unwrap();
    let (_, c) = context(&p, &x, &[1.0, 0.5], &[true, true]).unwrap();
    assert!(close(&c, &[0.7, -1.0], 1e-15));
}

#[test]
fn context_matches_brute_force() {
    let p = params(4, 3, 2, 22);
    let x = items(3, 4, 23);
    let z = [0.4, -1.1, 0.25];
    let (b, c) = context(&p, &x, &z, &[true; 3]).unwrap();
    let rho = vecmat(&z, &p.w_context_query);
    let logits: Vec<f64> = (0..3).map(|j| dot(&vecmat(x.row(j), &p.w_k), &rho) / 3f64.sqrt()).collect();
    let expect_b = softmax(&logits);
    assert!(close(&b, &expect_b, 1e-12));
    let values: Vec<Vec<f64>> = (0..3).map(|j| vecmat(x.row(j), &p.w_v)).collect();
    let expect_c: Vec<f64> = (0..3).map(|d| (0..3).map(|j| expect_b[j] * values[j][d]).sum()).collect();
    assert!(close(&c, &expect_c, 1e-12));
    assert!(context(&p, &x, &z, &[false; 3]).is_err());
}

#[test]
fn masked_items_do_not_influence_outputs() {
    let p = params(4, 4, 5, 24);
    let unit = VqaUnit::new(p);
    let mask = [true, false, true, false];
    let x = items(4, 4, 25);
    let mut y = x.clone();
    for c in 0..4 {
        y.data_mut()[4 + c] = 100.0 * (c as f64 - 1.5);
        y.data_mut()[12 + c] = -7.0;
    }
    for s in [ExtractionStrategy::weighted_average(), ExtractionStrategy::greedy(), ExtractionStrategy::sampling(1.0).unwrap()] {
        let a = unit.evaluate(&x, &StepMask::single(&mask), s, 3).unwrap();
        let b = unit.evaluate(&y, &StepMask::single(&mask), s, 3).unwrap();
        assert_eq!(a.belief.basket_attention, b.belief.basket_attention);
        assert_eq!(a.pattern, b.pattern);
        assert_eq!(a.context_attention, b.context_attention);
        assert_eq!(a.context, b.context);
    }
}

#[test]
fn logits_stay_finite_at_large_width() {
    for d in [2usize, 16, 128, 1024] {
        let mut p = params(d, d, 3, 26);
        let norm = |t: &Tensor| {
            let mut t = t.clone();
            for r in 0..t.rows() {
                let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let cols = t.cols();
                for v in &mut t.data_mut()[r * cols..(r + 1) * cols] {
                    *v /= n;
                }
            }
            t
        };
        p.codebook = Codebook::new(norm(p.codebook.entries())).unwrap();
        let x = norm(&items(3, d, 27));
        let out = VqaUnit::new(p)
            .evaluate(&x, &StepMask::single(&[true; 3]), ExtractionStrategy::weighted_average(), 0)
            .unwrap();
        assert!(out.context.is_finite() && out.belief.per_item_attention.is_finite());
    }
}

#[test]
fn causal_mask_evaluates_every_prefix() {
    let unit = VqaUnit::new(params(3, 3, 4, 28));
    let x = items(4, 3, 29);
    let all = unit.evaluate(&x, &StepMask::causal(4), ExtractionStrategy::weighted_average(), 0).unwrap();
    for t in 0..4 {
        let mask: Vec<bool> = (0..4).map(|j| j <= t).collect();
        let one = unit.evaluate(&x, &StepMask::single(&mask), ExtractionStrategy::weighted_average(), 0).unwrap();
        assert_eq!(all.belief.basket_attention.row(t), one.belief.basket_attention.row(0));
        assert!(close(all.context.row(t), one.context.row(0), 1e-15));
    }
}

proptest! {
    #[test]
    fn unit_is_order_invariant(n in 1usize..8, seed in any::<u64>()) {
        let unit = VqaUnit::new(params(4, 4, 6, seed));
        let x = items(n, 4, seed ^ 1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 2));
        let y = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mask = StepMask::single(&vec![true; n]);
        for s in [ExtractionStrategy::weighted_average(), ExtractionStrategy::greedy()] {
            let a = unit.evaluate(&x, &mask, s, 0).unwrap();
            let b = unit.evaluate(&y, &mask, s, 0).unwrap();
            prop_assert!(close(a.belief.basket_attention.data(), b.belief.basket_attention.data(), 1e-9));
            prop_assert!(close(a.context.data(), b.context.data(), 1e-9));
        }
    }

    #[test]
    fn beliefs_are_distributions(n in 1usize..8, patterns in 1usize..10, seed in any::<u64>()) {
        let unit = VqaUnit::new(params(5, 3, patterns, seed));
        let out = unit
            .evaluate(&items(n, 5, seed ^ 3), &StepMask::causal(n), ExtractionStrategy::weighted_average(), 0)
            .unwrap();
        for t in [&out.belief.per_item_attention, &out.belief.basket_attention, &out.context_attention] {
            for r in 0..t.rows() {
                prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(t.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
