mod common;

use rand::Rng;

use common::grad::{check_lum_loss, check_op, OPS};
use common::rng;
use lum_core::nn::ops::{masked_attention_forward, MASKED_SCORE};
use lum_core::nn::Tensor;
use lum_core::tokenize::AttentionMaskSpec;

const SEEDS: u64 = 20;
const TOLERANCE: f64 = 1e-3;

#[test]
fn every_op_passes_finite_differences() {
    for op in OPS {
        for seed in 0..SEEDS {
            let err = check_op(op, seed);
            assert!(err < TOLERANCE, "{op} seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn two_layer_lum_loss_passes_finite_differences() {
    for seed in 0..SEEDS {
        let err = check_lum_loss(seed, 1.0, 1e-3);
        assert!(err < TOLERANCE, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn lum_loss_at_training_temperature_passes_with_finer_step() {
    for seed in 0..SEEDS {
        let err = check_lum_loss(seed, 0.07, 1e-4);
        assert!(err < TOLERANCE, "seed {seed}: max relative error {err:e}");
    }
}

/// Textbook attention: per head, scores plus an additive mask constant,
/// softmax over the full row, weighted sum of values.
fn loop_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, mask: &AttentionMaskSpec) -> Tensor<f64> {
    let (n, dim) = (q.rows(), q.cols());
    let hd = dim / heads;
    let mut out = Tensor::zeros(&[n, dim]);
    for h in 0..heads {
        for p in 0..n {
            if mask.allowed_columns(p).is_empty() {
                continue;
            }
            let scores: Vec<f64> = (0..n)
                .map(|c| {
                    let dot: f64 = (0..hd).map(|j| q.row(p)[h * hd + j] * k.row(c)[h * hd + j]).sum();
                    dot / (hd as f64).sqrt() + if mask.allowed(p, c) { 0.0 } else { MASKED_SCORE }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..hd {
                out.row_mut(p)[h * hd + j] = (0..n).map(|c| e[c] / total * v.row(c)[h * hd + j]).sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let heads = r.random_range(1..4);
        let dim = heads * r.random_range(1..5);
        let n = r.random_range(1..12);
        let pad = r.random_range(0..=n / 2);
        let cut = r.random_range(0..=n - pad);
        let mask = AttentionMaskSpec::from_fn(n, (0..n).map(|p| p >= n - pad).collect(), |p, q| {
            p < n - pad && q <= p && (p < cut) == (q < cut)
        });
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn(&[n, dim], 1.0, &mut r));
        let (fast, _) = masked_attention_forward(&q, &k, &v, heads, &mask).unwrap();
        let slow = loop_attention(&q, &k, &v, heads, &mask);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn masked_probabilities_vanish() {
    let mut r = rng(3);
    let n = 6;
    let mask = AttentionMaskSpec::causal(n);
    let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f32>::randn(&[n, 4], 3.0, &mut r));
    let (_, cache) = masked_attention_forward(&q, &k, &v, 2, &mask).unwrap();
    for h in 0..2 {
        for p in 0..n {
            for c in p + 1..n {
                assert_eq!(cache.probs[h * n * n + p * n + c], 0.0);
            }
        }
    }
}
