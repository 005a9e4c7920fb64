use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use npa::tensor::{AdamW, AdamWConfig};
use npa::{Graph, NpaError, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| v.abs() + 0.5)
}

/// Reduce `v` to a scalar with fixed random weights, so every output entry
/// gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Var {
    let w = g.constant(random(g.shape(v), 99));
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

/// Autodiff against central differences for `f` at `inputs`.
fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let s = weighted_sum(&mut g, out);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let s = weighted_sum(&mut g, out);
    g.backward(s).unwrap();
    let h = 1e-5;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            assert!(
                abs <= 1e-6 || abs / a.abs().max(numeric.abs()) <= 1e-4,
                "{name}: input {k} coordinate {i}: autodiff {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn grad_matmul_and_transpose() {
    check("matmul", &[random(&[3, 4], 1), random(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("transpose", &[random(&[3, 4], 3)], |g, v| g.transpose(v[0]).unwrap());
}

#[test]
fn grad_elementwise() {
    let ab = [random(&[2, 3], 4), random(&[2, 3], 5)];
    check("add", &ab, |g, v| g.add(v[0], v[1]).unwrap());
    check("mul", &ab, |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &ab[..1], |g, v| g.scale(v[0], -2.5).unwrap());
    check("log", &[positive(&[2, 3], 6)], |g, v| g.log(v[0]).unwrap());
    check("exp", &[random(&[2, 3], 7)], |g, v| g.exp(v[0]).unwrap());
}

#[test]
fn grad_shape_ops() {
    check("concat_cols", &[random(&[3, 2], 8), random(&[3, 1], 9), random(&[3, 3], 10)], |g, v| {
        g.concat_cols(v).unwrap()
    });
    check("gather_rows", &[random(&[4, 3], 11)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
    check("pick_per_row", &[random(&[3, 4], 12)], |g, v| g.pick_per_row(v[0], &[1, 3, 1]).unwrap());
    check("mean_axis 0", &[random(&[3, 4], 13)], |g, v| g.mean_axis(v[0], 0).unwrap());
    check("mean_axis 1", &[random(&[3, 4], 14)], |g, v| g.mean_axis(v[0], 1).unwrap());
    check("masked_fill", &[random(&[2, 3], 15)], |g, v| {
        g.masked_fill(v[0], &[true, false, false, false, true, false], -3.0).unwrap()
    });
}

#[test]
fn grad_reductions_and_attention_ops() {
    check("softmax", &[random(&[3, 5], 16)], |g, v| g.softmax(v[0]).unwrap());
    let mask = [true, false, true, true, true, false, false, true, true];
    check("masked_softmax", &[random(&[3, 3], 17)], |g, v| g.masked_softmax(v[0], Some(&mask)).unwrap());
    check("masked_row_mean", &[random(&[3, 4], 18)], |g, v| g.masked_row_mean(v[0], 3, &mask).unwrap());
    check("cross_entropy", &[random(&[3, 6], 19)], |g, v| g.cross_entropy(v[0], &[5, 0, 2]).unwrap());
    check("row_max", &[random(&[3, 4], 20)], |g, v| g.row_max(v[0]).unwrap());
    check("sum", &[random(&[2, 2], 21)], |g, v| g.sum(v[0]).unwrap());
}

#[test]
fn grad_composed_chain() {
    check("chain", &[random(&[3, 4], 22), random(&[4, 4], 23)], |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let s = g.softmax(h).unwrap();
        let t = g.transpose(v[0]).unwrap();
        let back = g.matmul(s, t).unwrap();
        g.add(back, back).unwrap()
    });
}

#[test]
fn softmax_handles_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(&[1000.0, 1000.0]));
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn dot_product_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row_vector(&[2.0, 3.0]));
    let xt = g.transpose(x).unwrap();
    let d = g.matmul(x, xt).unwrap();
    let s = g.sum(d).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    assert!(matches!(g.matmul(a, b), Err(NpaError::Shape { .. })));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(random(&[4, 4], 30));
        let s = g.softmax(a).unwrap();
        let l = weighted_sum(&mut g, s);
        g.backward(l).unwrap();
        (g.value(s).clone(), g.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_reaches_least_squares_optimum() {
    // Minimize |A w - y|^2 with a known exact solution w* = [1, -2].
    let a = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.3, 2.0], vec![-1.0, 1.0]]).unwrap();
    let y = a.matmul(&Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap()).unwrap();
    let mut params = vec![Tensor::zeros(&[2, 1])];
    let cfg = AdamWConfig {
        learning_rate: 0.05,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &params);
    let names = vec!["w".to_string()];
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let mut g = Graph::new();
        let w = g.param(params[0].clone());
        let av = g.constant(a.clone());
        let pred = g.matmul(av, w).unwrap();
        let neg = g.constant(y.map(|v| -v));
        let r = g.add(pred, neg).unwrap();
        let sq = g.mul(r, r).unwrap();
        let l = g.sum(sq).unwrap();
        loss = g.value(l).item();
        g.backward(l).unwrap();
        opt.step(&mut params, &[g.grad(w).cloned()], &names).unwrap();
    }
    assert!(loss < 1e-3, "loss {loss}");
    assert_eq!(opt.state.step_count, 200);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(random(&[rows, cols], seed).map(|v| v * scale));
        let s = g.softmax(x).unwrap();
        let t = g.value(s);
        for r in 0..rows {
            let row = t.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            if cols > 1 && scale < 10.0 {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn masked_rows_get_zero_weight(cols in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.5)).collect();
        mask[rng.random_range(0..cols)] = true;
        let mut g = Graph::new();
        let x = g.constant(random(&[1, cols], seed));
        let s = g.masked_softmax(x, Some(&mask)).unwrap();
        for (p, m) in g.value(s).data().iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn masked_row_mean_is_order_free(rows in 1usize..8, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[rows, cols], seed);
        let mut perm: Vec<usize> = (0..rows).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let b = Tensor::from_rows(&perm.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let vis = vec![true; rows];
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let ma = g.masked_row_mean(va, 1, &vis).unwrap();
        let mb = g.masked_row_mean(vb, 1, &vis).unwrap();
        prop_assert_eq!(g.value(ma).data(), g.value(mb).data());
    }
}
