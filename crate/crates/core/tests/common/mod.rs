#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use npa::data::{SynthSpec, SynthTruth};
use npa::model::Mode;
use npa::training::{sequence_gradient, step_log_likelihoods, step_losses, Objective};
use npa::vqa::StrategyKind;
use npa::{Graph, ModelConfig, NpaModel, Variant};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-6;

/// Summed per-step loss of `seq`, with the RNG stream used for training.
pub fn sequence_loss(model: &NpaModel, seq: &[usize], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = step_log_likelihoods(&mut g, model, &vars, seq, Mode::Train, &mut rng).unwrap();
    let losses = step_losses(&mut g, scores, Objective::for_model(model)).unwrap();
    g.value(losses).data().iter().sum()
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

fn agrees(a: f64, n: f64) -> bool {
    let abs = (a - n).abs();
    abs <= FD_ABS_TOL || abs / a.abs().max(n.abs()) <= FD_REL_TOL
}

/// Central differences on every parameter coordinate.
pub fn grad_check(model: &NpaModel, seq: &[usize], seed: u64) -> GradCheck {
    let analytic = sequence_gradient(model, seq, seed).unwrap().grads;
    let mut m = model.clone();
    let mut out = GradCheck::default();
    for p in 0..m.params().len() {
        for i in 0..m.params().get(p).numel() {
            let orig = m.params().get(p).data()[i];
            m.params_mut().get_mut(p).data_mut()[i] = orig + FD_STEP;
            let up = sequence_loss(&m, seq, seed);
            m.params_mut().get_mut(p).data_mut()[i] = orig - FD_STEP;
            let down = sequence_loss(&m, seq, seed);
            m.params_mut().get_mut(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[p].data()[i];
            out.coordinates += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            if !agrees(a, numeric) {
                out.failures += 1;
            }
            if rel > out.worst_rel && (a - numeric).abs() > FD_ABS_TOL {
                out.worst_rel = rel;
                out.worst = Some((m.params().names()[p].clone(), i, a, numeric));
            }
        }
    }
    out
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        num_items: 20,
        embedding_dim: 8,
        num_layers: 2,
        channels_per_layer: vec![2, 2],
        num_patterns: 6,
        variant,
        mc_last_layer_heads: 2,
        dropout_rate: 0.0,
        max_sequence_length: 16,
        ..ModelConfig::default()
    }
}

/// A random valid model configuration with a small footprint.
pub fn random_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let variant = if rng.random_bool(0.5) { Variant::Sc } else { Variant::Mc };
    let num_layers = rng.random_range(1..=3);
    let embedding_dim = *[4usize, 6, 8, 12].choose(rng).unwrap();
    let divisors: Vec<usize> = (1..=4).filter(|h| embedding_dim % h == 0).collect();
    let heads = rng.random_range(1..=3);
    let mut channels: Vec<usize> = (0..num_layers).map(|_| *divisors.choose(rng).unwrap()).collect();
    if variant == Variant::Mc {
        *channels.last_mut().unwrap() = heads;
    }
    ModelConfig {
        num_items: rng.random_range(5..=40),
        embedding_dim,
        num_layers,
        channels_per_layer: channels,
        num_patterns: rng.random_range(1..=12),
        variant,
        mc_last_layer_heads: heads,
        sc_last_strategy: if rng.random_bool(0.5) {
            StrategyKind::WeightedAverage
        } else {
            StrategyKind::Greedy
        },
        gumbel_temperature: rng.random_range(0.2..2.0),
        dropout_rate: 0.0,
        max_sequence_length: 12,
        tie_output_embeddings: rng.random_bool(0.3),
        use_positions: rng.random_bool(0.5),
    }
}

/// A basket of `1..=max_len` items drawn with replacement.
pub fn random_basket<R: Rng>(rng: &mut R, num_items: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..num_items)).collect()
}

/// Posterior-predictive item scores under the generator, marginalizing over
/// every admissible pattern set. Basket-length and without-replacement
/// effects are ignored, so this is an approximate Bayes oracle.
pub fn oracle_scores(spec: &SynthSpec, truth: &SynthTruth, input: &[usize]) -> Vec<f64> {
    let k = spec.num_patterns;
    let pattern_w = spec.pattern_weights();
    let item_w = spec.item_weights();
    let mut rank = vec![vec![None; spec.num_items]; k];
    for (q, pool) in truth.pools.iter().enumerate() {
        for (r, &i) in pool.iter().enumerate() {
            rank[q][i] = Some(r);
        }
    }
    let likelihood = |set: &[usize], j: usize| -> f64 {
        let planted: f64 = set
            .iter()
            .filter_map(|&q| rank[q][j].map(|r| item_w[r]))
            .sum::<f64>()
            / set.len() as f64;
        spec.noise_probability / spec.num_items as f64 + (1.0 - spec.noise_probability) * planted
    };
    let mut sets = Vec::new();
    for mask in 1u64..(1 << k) {
        let n = mask.count_ones() as usize;
        if n < spec.min_patterns_per_basket || n > spec.max_patterns_per_basket {
            continue;
        }
        let set: Vec<usize> = (0..k).filter(|&q| mask >> q & 1 == 1).collect();
        let mut log_post: f64 = set.iter().map(|&q| pattern_w[q].ln()).sum();
        for &i in input {
            log_post += likelihood(&set, i).ln();
        }
        sets.push((set, log_post));
    }
    let top = sets.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut scores = vec![0.0; spec.num_items];
    for (set, lp) in &sets {
        let w = (lp - top).exp();
        for (j, s) in scores.iter_mut().enumerate() {
            *s += w * likelihood(set, j);
        }
    }
    scores
}
