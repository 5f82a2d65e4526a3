//! Evaluation metrics and the scaling-law fit.
//!
//! Throughput benchmarks live here too.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_synthetic_corpus, Corpus, ItemId, SyntheticWorldConfig};
use crate::lum::{build_sequences, packed_batch_loss, Candidates, LumConfig, LumModel};
use crate::nn::{AdamConfig, Tape};
use crate::tokenize::{
    build_group_query_batch, pack, pack_one_per_row, AttentionMaskSpec, ConditionFields,
    PackedBatch, TokenizedSequence,
};
use crate::{LumError, Result};

/// Probability that a random positive outscores a random negative, ties
/// counted as half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(LumError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(LumError::InvalidInput(format!("label {l} is not 0 or 1")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(LumError::InvalidInput(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LumError::InvalidInput(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_avg = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_avg * positives;
        i = j + 1;
    }
    let p = pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(LumError::InvalidInput("k must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(LumError::InvalidInput("recall needs a relevant item".into()));
    }
    let top: BTreeSet<ItemId> = ranked.iter().take(k).copied().collect();
    Ok(top.intersection(relevant).count() as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// Parameter count or sequence length.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * x.ln() + self.b
    }
}

/// Least squares of `y` on `ln(x)`: `y = a ln(x) + b`.
pub fn fit_scaling_law(points: &[ScalingPoint]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(LumError::InvalidInput("a fit needs at least two points".into()));
    }
    if let Some(p) = points.iter().find(|p| !(p.x > 0.0) || !p.y.is_finite()) {
        return Err(LumError::InvalidInput(format!(
            "point ({}, {}) needs x > 0 and finite y",
            p.x, p.y
        )));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.x.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LumError::InvalidInput(
            "every point shares the same x; the fit is singular".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(points).map(|(x, p)| (x - mx) * (p.y - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(points)
        .map(|(x, p)| (p.y - (a * x + b)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(FitResult { a, b, r_squared })
}

/// Writes `x,y,fit_y` rows for plotting.
pub fn write_plot_csv(path: &Path, points: &[ScalingPoint], fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "fit_y"])?;
    for p in points {
        w.write_record([p.x.to_string(), p.y.to_string(), fit.predict(p.x).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub config: serde_json::Value,
    /// Median seconds of the measured variant.
    pub seconds: f64,
    pub baseline_seconds: f64,
    /// Work units per repetition (tokens or queries).
    pub items: usize,
    pub throughput: f64,
    pub baseline_throughput: f64,
    pub speedup: f64,
    pub repetitions: usize,
    /// Largest relative distance of any repetition from its median; above
    /// 0.2 the measurement is noisy.
    pub max_spread: f64,
}

impl BenchReport {
    pub fn noisy(&self) -> bool {
        self.max_spread > 0.2
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 1,
            repetitions: 5,
        }
    }
}

fn median_seconds(opts: &BenchOptions, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..opts.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(opts.repetitions.max(5));
    for _ in 0..opts.repetitions.max(5) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let spread = times
        .iter()
        .map(|t| (t - median).abs() / median.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok((median, spread))
}

/// Synthetic corpus whose history lengths are skewed: 80% of users have at
/// most `max_len / 4` tokens, the rest up to `max_len`.
pub fn skewed_corpus(num_users: usize, max_len: usize, seed: u64) -> Result<Corpus> {
    let max_events = (max_len / 2).max(2);
    let base = generate_synthetic_corpus(&SyntheticWorldConfig {
        num_users,
        events_per_user_range: [max_events, max_events],
        rng_seed: seed,
        ..SyntheticWorldConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let short = (max_len / 8).max(1);
    let users = base
        .users
        .iter()
        .map(|(&u, ev)| {
            let n = if rng.random_bool(0.8) {
                rng.random_range(1..=short)
            } else {
                rng.random_range(short + 1..=max_events.max(short + 1))
            };
            (u, ev[..n.min(ev.len())].to_vec())
        })
        .collect();
    Ok(base.with_users(users))
}

fn train_pass(model: &mut LumModel<f32>, rows: &[PackedBatch], corpus: &Corpus) -> Result<()> {
    let adam = AdamConfig::with_lr(model.config.learning_rate);
    let candidates = Candidates::InBatch {
        max_negatives: model.config.negatives_per_positive,
        seed: 0,
    };
    for batch in rows.chunks(model.config.batch_size) {
        let grads = {
            let mut tape = Tape::new(&model.params);
            let (loss, n) = packed_batch_loss(model, &mut tape, batch, &corpus.items, &candidates)?;
            let loss = tape.scale(loss, 1.0 / n as f32);
            tape.backward(loss)?.param_grads(&tape)
        };
        model.params.adam_step(&grads, &adam)?;
    }
    Ok(())
}

/// Training tokens per second with packed rows against one sequence per row.
pub fn bench_packing(corpus: &Corpus, config: &LumConfig, opts: &BenchOptions) -> Result<BenchReport> {
    let sequences = build_sequences(corpus, config.max_sequence_tokens)?;
    let tokens: usize = sequences.iter().map(TokenizedSequence::len).sum();
    let packed = pack(&sequences, config.max_sequence_tokens)?;
    let unpacked = pack_one_per_row(&sequences, config.max_sequence_tokens)?;
    let fresh = || LumModel::<f32>::new(config.clone(), corpus.vocab);
    let mut model = fresh()?;
    let (seconds, s1) = median_seconds(opts, || train_pass(&mut model, &packed, corpus))?;
    let mut model = fresh()?;
    let (baseline_seconds, s2) = median_seconds(opts, || train_pass(&mut model, &unpacked, corpus))?;
    Ok(BenchReport {
        name: "packing".into(),
        config: serde_json::json!({
            "sequences": sequences.len(),
            "max_len": config.max_sequence_tokens,
            "packed_rows": packed.len(),
            "unpacked_rows": unpacked.len(),
            "model_dim": config.attention.model_dim,
            "num_layers": config.attention.num_layers,
        }),
        seconds,
        baseline_seconds,
        items: tokens,
        throughput: tokens as f64 / seconds,
        baseline_throughput: tokens as f64 / baseline_seconds,
        speedup: baseline_seconds / seconds,
        repetitions: opts.repetitions.max(5),
        max_spread: s1.max(s2),
    })
}

/// One group pass over a shared prefix against `num_queries` sequential
/// prefix-plus-condition passes.
pub fn bench_group_query(
    model: &LumModel<f32>,
    prefix: &TokenizedSequence,
    conditions: &[ConditionFields],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let (group, group_mask) = build_group_query_batch(prefix, conditions)?;
    let singles: Vec<(PackedBatch, AttentionMaskSpec)> = conditions
        .iter()
        .map(|c| {
            let (mut b, _) = build_group_query_batch(prefix, std::slice::from_ref(c))?;
            b.loss_positions.fill(false);
            let n = b.len();
            Ok((b, AttentionMaskSpec::causal(n)))
        })
        .collect::<Result<_>>()?;
    let group_mask = Arc::new(group_mask);
    let (seconds, s1) = median_seconds(opts, || model.forward(&group, &group_mask).map(drop))?;
    let (baseline_seconds, s2) = median_seconds(opts, || {
        for (b, m) in &singles {
            model.forward(b, m)?;
        }
        Ok(())
    })?;
    let q = conditions.len();
    Ok(BenchReport {
        name: "group_query".into(),
        config: serde_json::json!({
            "prefix_tokens": prefix.len(),
            "num_queries": q,
            "model_dim": model.config.attention.model_dim,
            "num_layers": model.config.attention.num_layers,
        }),
        seconds,
        baseline_seconds,
        items: q,
        throughput: q as f64 / seconds,
        baseline_throughput: q as f64 / baseline_seconds,
        speedup: baseline_seconds / seconds,
        repetitions: opts.repetitions.max(5),
        max_spread: s1.max(s2),
    })
}

/// The last `tokens` tokens of the longest history in `corpus`.
pub fn bench_prefix(corpus: &Corpus, tokens: usize) -> Result<TokenizedSequence> {
    let seq = build_sequences(corpus, usize::MAX - 1)?
        .into_iter()
        .max_by_key(TokenizedSequence::len)
        .ok_or_else(|| LumError::InvalidInput("empty corpus".into()))?;
    if seq.len() < tokens {
        return Err(LumError::InvalidInput(format!(
            "longest history has {} tokens, {tokens} requested",
            seq.len()
        )));
    }
    Ok(TokenizedSequence {
        user_id: seq.user_id,
        tokens: seq.tokens[seq.len() - tokens..].to_vec(),
    })
}

/// Conditions used by benchmarks: every scenario, cycling.
pub fn bench_conditions(num_scenarios: usize, count: usize) -> Vec<ConditionFields> {
    (0..count)
        .map(|i| ConditionFields::scenario((i % num_scenarios.max(1)) as u32 + 1))
        .collect()
}
