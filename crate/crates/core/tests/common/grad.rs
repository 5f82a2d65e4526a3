//! Finite-difference checks of every tape op and of the full LUM loss, in f64.

use std::sync::Arc;

use rand::Rng;

use lum_core::lum::{packed_batch_loss, Candidates, FieldDims, LumModel};
use lum_core::nn::gradcheck::{grad_check, GradCheckOptions};
use lum_core::nn::{AttentionBlock, ParamGrads, ParamId, ParameterStore, Tape, Tensor, Var};
use lum_core::tokenize::{pack, AttentionMaskSpec};
use lum_core::Result;

use super::{random_config, rng, sequences, small_corpus};

pub const OPS: [&str; 15] = [
    "linear",
    "matmul_nt",
    "add",
    "scale",
    "gelu",
    "layer_norm",
    "attention",
    "embedding",
    "embedding_bag",
    "concat_cols",
    "gather_rows",
    "scatter_rows",
    "l2_normalize",
    "softmax_cross_entropy",
    "bce_with_logits",
];

fn randn(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Random mask over `n` positions: causal segments with optional padding
/// tail and, half the time, a group-query style block of isolated rows.
fn random_mask(r: &mut impl Rng, n: usize) -> AttentionMaskSpec {
    let pad = r.random_range(0..n / 2);
    let real = n - pad;
    let cut = r.random_range(1..=real);
    let isolated = r.random_bool(0.5);
    let padding = (0..n).map(|p| p >= real).collect();
    AttentionMaskSpec::from_fn(n, padding, |p, q| {
        if p >= real || q >= real {
            return false;
        }
        let (sp, sq) = (p >= cut, q >= cut);
        if isolated && sp {
            return q < cut || q == p;
        }
        sp == sq && q <= p
    })
}

type Build = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

/// A random instance of `op`: parameters, and the graph from those
/// parameters to a scalar.
fn instance(op: &str, seed: u64) -> (ParameterStore<f64>, Build) {
    let mut r = rng(seed);
    let rows = r.random_range(1..6);
    let cols = r.random_range(1..6);
    let mut s = ParameterStore::new();
    let add = |s: &mut ParameterStore<f64>, name: &str, t: Tensor<f64>| {
        s.add(name, t).unwrap();
    };
    let probe = randn(&mut r, &[rows, cols]);
    let weighted = move |probe: Tensor<f64>| {
        move |t: &mut Tape<'_, f64>, v: Var| t.weighted_sum(v, probe.clone())
    };
    let build: Build = match op {
        "linear" => {
            let inner = r.random_range(1..6);
            add(&mut s, "x", randn(&mut r, &[rows, inner]));
            add(&mut s, "w", randn(&mut r, &[inner, cols]));
            add(&mut s, "b", randn(&mut r, &[cols]));
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.linear(p[0], p[1], p[2])?;
                w(t, y)
            })
        }
        "matmul_nt" => {
            let inner = r.random_range(1..6);
            add(&mut s, "a", randn(&mut r, &[rows, inner]));
            add(&mut s, "b", randn(&mut r, &[cols, inner]));
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.matmul_nt(p[0], p[1])?;
                w(t, y)
            })
        }
        "add" => {
            add(&mut s, "a", randn(&mut r, &[rows, cols]));
            add(&mut s, "b", randn(&mut r, &[rows, cols]));
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.add(p[0], p[1])?;
                w(t, y)
            })
        }
        "scale" => {
            add(&mut s, "x", randn(&mut r, &[rows, cols]));
            let f = r.random_range(-3.0..3.0);
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.scale(p[0], f);
                w(t, y)
            })
        }
        "gelu" => {
            add(&mut s, "x", Tensor::randn(&[rows, cols], 2.0, &mut r));
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.gelu(p[0]);
                w(t, y)
            })
        }
        "layer_norm" => {
            // Over one or two features the normalized output is locally
            // constant or nearly so, and a 1e-3 central difference measures
            // curvature rather than the gradient.
            let cols = cols + 3;
            add(&mut s, "x", randn(&mut r, &[rows, cols]));
            add(&mut s, "g", randn(&mut r, &[cols]));
            add(&mut s, "b", randn(&mut r, &[cols]));
            let w = weighted(randn(&mut r, &[rows, cols]));
            Box::new(move |t, p| {
                let y = t.layer_norm(p[0], p[1], p[2])?;
                w(t, y)
            })
        }
        "attention" => {
            let heads = r.random_range(1..4);
            let dim = heads * r.random_range(1..4);
            let n = r.random_range(2..9);
            let extra = r.random_range(0..3);
            for name in ["q", "k", "v"] {
                add(&mut s, name, randn(&mut r, &[n + extra, dim]));
            }
            let mask = Arc::new(random_mask(&mut r, n));
            let offset = r.random_range(0..=extra);
            let w = weighted(randn(&mut r, &[n + extra, dim]));
            Box::new(move |t, p| {
                let blocks = vec![AttentionBlock {
                    offset,
                    mask: mask.clone(),
                }];
                let y = t.attention(p[0], p[1], p[2], heads, blocks)?;
                w(t, y)
            })
        }
        "embedding" => {
            let vocab = r.random_range(1..6);
            add(&mut s, "table", randn(&mut r, &[vocab, cols]));
            let idx: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.embedding(p[0], idx.clone(), "test")?;
                w(t, y)
            })
        }
        "embedding_bag" => {
            let vocab = r.random_range(1..6);
            add(&mut s, "table", randn(&mut r, &[vocab, cols]));
            let bags: Vec<Vec<usize>> = (0..rows)
                .map(|_| (0..r.random_range(0..4)).map(|_| r.random_range(0..vocab)).collect())
                .collect();
            let w = weighted(probe);
            Box::new(move |t, p| {
                let y = t.embedding_bag(p[0], bags.clone(), "test")?;
                w(t, y)
            })
        }
        "concat_cols" => {
            let other = r.random_range(1..4);
            add(&mut s, "a", randn(&mut r, &[rows, cols]));
            add(&mut s, "b", randn(&mut r, &[rows, other]));
            let w = weighted(randn(&mut r, &[rows, cols + other]));
            Box::new(move |t, p| {
                let y = t.concat_cols(vec![p[0], p[1]])?;
                w(t, y)
            })
        }
        "gather_rows" => {
            add(&mut s, "x", randn(&mut r, &[rows, cols]));
            let n = r.random_range(1..8);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..rows)).collect();
            let w = weighted(randn(&mut r, &[n, cols]));
            Box::new(move |t, p| {
                let y = t.gather_rows(p[0], idx.clone())?;
                w(t, y)
            })
        }
        "scatter_rows" => {
            let total = rows + r.random_range(0..3);
            let mut order: Vec<usize> = (0..total).collect();
            for i in (1..total).rev() {
                order.swap(i, r.random_range(0..=i));
            }
            let split = r.random_range(0..=rows);
            let (ia, ib) = (order[..split].to_vec(), order[split..rows].to_vec());
            add(&mut s, "a", randn(&mut r, &[ia.len().max(1), cols]));
            add(&mut s, "b", randn(&mut r, &[ib.len().max(1), cols]));
            let w = weighted(randn(&mut r, &[total, cols]));
            Box::new(move |t, p| {
                let mut parts = Vec::new();
                if !ia.is_empty() {
                    parts.push((p[0], ia.clone()));
                }
                if !ib.is_empty() {
                    parts.push((p[1], ib.clone()));
                }
                let y = t.scatter_rows(total, cols, parts)?;
                w(t, y)
            })
        }
        "l2_normalize" => {
            // A one-column row normalizes to a constant sign.
            let cols = cols + 1;
            add(&mut s, "x", randn(&mut r, &[rows, cols]));
            let w = weighted(randn(&mut r, &[rows, cols]));
            Box::new(move |t, p| {
                let y = t.l2_normalize(p[0])?;
                w(t, y)
            })
        }
        "softmax_cross_entropy" => {
            add(&mut s, "logits", randn(&mut r, &[rows, cols]));
            let mut valid = vec![false; rows * cols];
            let mut targets = Vec::new();
            for row in 0..rows {
                let t = r.random_range(0..cols);
                targets.push(t);
                for c in 0..cols {
                    valid[row * cols + c] = c == t || r.random_bool(0.7);
                }
            }
            Box::new(move |t, p| t.softmax_cross_entropy(p[0], valid.clone(), targets.clone()))
        }
        "bce_with_logits" => {
            add(&mut s, "logits", Tensor::randn(&[rows, 1], 3.0, &mut r));
            let labels: Vec<f64> = (0..rows).map(|_| r.random_range(0..2) as f64).collect();
            Box::new(move |t, p| t.bce_with_logits(p[0], labels.clone()))
        }
        other => panic!("unknown op {other}"),
    };
    (s, build)
}

fn evaluate(store: &ParameterStore<f64>, build: &Build) -> Result<(f64, ParamGrads<f64>)> {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = (0..store.len()).map(|i| tape.param(ParamId(i))).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?.param_grads(&tape);
    Ok((tape.value(loss).data()[0], grads))
}

/// Worst relative error over one random instance of `op`.
pub fn check_op(op: &str, seed: u64) -> f64 {
    check_op_with(op, seed, &GradCheckOptions::default())
}

pub fn check_op_with(op: &str, seed: u64, opts: &GradCheckOptions) -> f64 {
    let (store, build) = instance(op, seed);
    let report = grad_check(&store, |s| evaluate(s, &build), opts).unwrap();
    report.max_rel_error
}

/// Worst relative error of the 2-layer LUM contrastive loss over a packed
/// batch, with in-batch negatives capped below the candidate count.
///
/// The logits are cosines divided by the temperature, so the loss curvature
/// grows like `1 / temperature^2`; at the training temperature a 1e-3 step
/// carries truncation error of the same order as the tolerance.
pub fn check_lum_loss(seed: u64, temperature: f64, step: f64) -> f64 {
    let mut r = rng(seed);
    let corpus = small_corpus(seed, 3);
    let mut config = random_config(&mut r, 12);
    config.attention.num_layers = 2;
    // Layer norm over very few features has near-singular curvature for rows
    // of small spread, the same failure mode as in the single-op check.
    if config.attention.model_dim < 8 {
        config.attention.model_dim = 8;
        config.attention.mlp_hidden_dim = 16;
    }
    config.field_dims = FieldDims::uniform(config.field_dims.item_id.max(4));
    config.negatives_per_positive = 4;
    config.temperature = temperature;
    let model: LumModel<f64> = LumModel::<f32>::new(config, corpus.vocab).unwrap().cast();
    let rows = pack(&sequences(&corpus, 12), 12).unwrap();
    let candidates = Candidates::InBatch {
        max_negatives: 4,
        seed,
    };
    let opts = GradCheckOptions {
        max_elements_per_param: 12,
        step,
        ..Default::default()
    };
    let f = |store: &ParameterStore<f64>| {
        let mut m = model.clone();
        m.params = store.clone();
        let mut tape = Tape::new(&m.params);
        let (loss, _) = packed_batch_loss(&m, &mut tape, &rows, &corpus.items, &candidates)?;
        let grads = tape.backward(loss)?.param_grads(&tape);
        Ok((tape.value(loss).data()[0], grads))
    };
    grad_check(&model.params, f, &opts).unwrap().max_rel_error
}
