//! Oracles and instance generators shared by the integration suites.

#![allow(dead_code)]

use std::sync::Arc;

pub mod cache;
pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lum_core::datagen::{generate_synthetic_corpus, Corpus, SyntheticWorldConfig, Vocabulary};
use lum_core::lum::{packed_batch_loss, Candidates, FieldDims, LumConfig, LumModel};
use lum_core::nn::{AttentionConfig, Real, Tape};
use lum_core::query::{KnowledgeQuery, QueryEngine};
use lum_core::tokenize::{
    build_training_mask, pack, pack_one_per_row, tokenize_sequence, truncate, ConditionFields,
    PackedBatch, TokenizedSequence,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Relative error of two vectors measured against the larger norm.
pub fn vec_rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(f64::MIN_POSITIVE)
}

/// A small synthetic world with a few query terms, so every condition field
/// is exercised.
pub fn small_corpus(seed: u64, users: usize) -> Corpus {
    let mut corpus = generate_synthetic_corpus(&SyntheticWorldConfig {
        num_users: users,
        num_items: 40,
        num_scenarios: 3,
        num_categories: 5,
        events_per_user_range: [2, 12],
        rng_seed: seed,
        ..Default::default()
    })
    .unwrap();
    let mut r = rng(seed ^ 0xc0de);
    corpus.vocab.num_query_terms = 6;
    for events in corpus.users.values_mut() {
        for e in events {
            let n = r.random_range(0..3);
            e.query_terms = (0..n).map(|_| r.random_range(1..6)).collect();
            e.category_id = r.random_range(0..corpus.vocab.num_categories as u32);
        }
    }
    corpus
}

/// Random small transformer shapes.
pub fn random_config(r: &mut impl Rng, max_tokens: usize) -> LumConfig {
    let heads = [1, 2, 4][r.random_range(0..3)];
    let model_dim = heads * [2, 4, 8][r.random_range(0..3)];
    LumConfig {
        attention: AttentionConfig {
            model_dim,
            num_heads: heads,
            num_layers: r.random_range(1..=2),
            mlp_hidden_dim: 2 * model_dim,
        },
        field_dims: FieldDims::uniform(r.random_range(2..=6)),
        max_sequence_tokens: max_tokens,
        seed: r.random(),
        ..LumConfig::tiny()
    }
}

pub fn random_model(r: &mut impl Rng, vocab: Vocabulary, max_tokens: usize) -> LumModel<f32> {
    LumModel::new(random_config(r, max_tokens), vocab).unwrap()
}

pub fn random_condition(r: &mut impl Rng, vocab: &Vocabulary) -> ConditionFields {
    loop {
        let c = ConditionFields {
            scenario_id: r.random_range(0..vocab.num_scenarios as u32),
            query_terms: (0..r.random_range(0..3))
                .map(|_| r.random_range(0..vocab.num_query_terms.max(1) as u32))
                .collect(),
            category_id: r.random_range(0..vocab.num_categories as u32),
        };
        if !c.is_blank() {
            return c;
        }
    }
}

pub fn sequences(corpus: &Corpus, max_tokens: usize) -> Vec<TokenizedSequence> {
    corpus
        .users
        .values()
        .map(|ev| truncate(&tokenize_sequence(ev, &corpus.items).unwrap(), max_tokens).unwrap())
        .collect()
}

/// Negatives for every loss position of `rows`, in row order, as a function
/// of the segment's user and the position within it. Packed and unpacked
/// layouts therefore see identical negative sets.
pub fn fixed_negatives(rows: &[PackedBatch], num_items: usize, per: usize, seed: u64) -> Candidates {
    let mut sets = Vec::new();
    for row in rows {
        for p in 0..row.len() {
            if row.loss_positions[p] {
                let user = row.segment_users[row.segment_ids[p] as usize];
                let mut r = rng(seed ^ ((user as u64) << 20) ^ row.position_ids[p] as u64);
                sets.push((0..per).map(|_| r.random_range(0..num_items as u32)).collect());
            }
        }
    }
    Candidates::Fixed(sets)
}

/// Summed loss over all rows with negatives drawn by [`fixed_negatives`].
pub fn total_loss<T: Real>(model: &LumModel<T>, corpus: &Corpus, rows: &[PackedBatch], seed: u64) -> f64 {
    let tape_store = &model.params;
    let mut tape = Tape::new(tape_store);
    let negs = fixed_negatives(rows, corpus.vocab.num_items, 6, seed);
    let (loss, _) = packed_batch_loss(model, &mut tape, rows, &corpus.items, &negs).unwrap();
    tape.value(loss).data()[0].to_f64().unwrap()
}

/// Packed loss against the per-sequence sum on one random instance. Returns
/// the relative error.
pub fn packing_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let corpus = small_corpus(seed, r.random_range(3..10));
    let max_tokens = 24;
    let model = random_model(&mut r, corpus.vocab, max_tokens);
    let seqs = sequences(&corpus, max_tokens);
    let packed = pack(&seqs, max_tokens).unwrap();
    let packed_loss = total_loss(&model, &corpus, &packed, seed);
    let mut separate = 0.0;
    for row in pack_one_per_row(&seqs, max_tokens).unwrap() {
        separate += total_loss(&model, &corpus, std::slice::from_ref(&row), seed);
    }
    rel_err(packed_loss, separate)
}

pub struct GroupCheck {
    pub max_rel_err: f64,
    pub orderings_match: bool,
}

/// Every query_group output against the query_single oracle.
pub fn group_query_instance(seed: u64) -> GroupCheck {
    let mut r = rng(seed);
    let corpus = small_corpus(seed, 4);
    let max_tokens = 2 * r.random_range(4..14);
    let model = random_model(&mut r, corpus.vocab, max_tokens);
    let engine = QueryEngine::new(&model, &corpus.items).unwrap();
    let (&user, history) = corpus.users.iter().nth(r.random_range(0..4)).unwrap();
    let history = &history[..r.random_range(0..=history.len())];
    let queries: Vec<_> = (0..r.random_range(1..=8))
        .map(|_| KnowledgeQuery::new(user, random_condition(&mut r, &corpus.vocab)).unwrap())
        .collect();
    let k = r.random_range(1..=10);
    let group = engine.query_group(history, &queries, k).unwrap();
    let mut check = GroupCheck {
        max_rel_err: 0.0,
        orderings_match: true,
    };
    for (q, g) in queries.iter().zip(&group) {
        let s = engine.query_single(history, q, k).unwrap();
        check.max_rel_err = check.max_rel_err.max(vec_rel_err(&g.o, &s.o));
        let ids = |v: &[(u32, f32)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
        check.orderings_match &= ids(&g.top_k) == ids(&s.top_k);
    }
    check
}

/// Perturbs every token after condition position `2l` and checks that the
/// output at that position does not change by a single bit.
pub fn causality_probe(seed: u64) -> bool {
    let mut r = rng(seed);
    let corpus = small_corpus(seed, 6);
    let max_tokens = 24;
    let model = random_model(&mut r, corpus.vocab, max_tokens);
    let seqs: Vec<_> = sequences(&corpus, max_tokens)
        .into_iter()
        .filter(|s| s.len() >= 4)
        .collect();
    let seq = &seqs[r.random_range(0..seqs.len())];
    let l = r.random_range(0..seq.len() / 2);
    let p = 2 * l;
    let forward = |s: &TokenizedSequence| {
        let row = pack_one_per_row(std::slice::from_ref(s), max_tokens).unwrap().remove(0);
        let mask = build_training_mask(&row);
        let masked = [(&row, Arc::new(mask))];
        let mut tape = Tape::new(&model.params);
        let o = model.forward_tape(&mut tape, &masked).unwrap();
        tape.value(o).row(p).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let base = forward(seq);
    let other = &seqs[r.random_range(0..seqs.len())];
    let mut perturbed = seq.clone();
    for q in p + 1..seq.len() {
        perturbed.tokens[q] = if q % 2 == 0 {
            lum_core::tokenize::Token::Condition(random_condition(&mut r, &corpus.vocab))
        } else {
            other.tokens[(q % other.len()) | 1].clone()
        };
    }
    forward(&perturbed) == base
}

/// AUC by enumerating every positive/negative pair, ties worth one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

/// Random scores drawn from a small grid so ties are common, with at least
/// one label of each class.
pub fn auc_instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let n = r.random_range(2..60);
    let grid = r.random_range(2..12);
    let scores = (0..n).map(|_| r.random_range(0..grid) as f64 / grid as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 1;
    labels[1] = 0;
    (scores, labels)
}

/// `auc` against [`pairwise_auc`] on one instance; exact equality.
pub fn auc_matches_oracle(seed: u64) -> bool {
    let (scores, labels) = auc_instance(seed);
    lum_core::eval::auc(&scores, &labels).unwrap() == pairwise_auc(&scores, &labels)
}

/// `recall_at_k` against a count over the first `k` ranks.
pub fn recall_matches_oracle(seed: u64) -> bool {
    let mut r = rng(seed);
    let n: u32 = r.random_range(1..50);
    let mut ranked: Vec<u32> = (0..n).collect();
    for i in (1..ranked.len()).rev() {
        ranked.swap(i, r.random_range(0..=i));
    }
    let relevant: std::collections::BTreeSet<u32> =
        (0..r.random_range(1..8)).map(|_| r.random_range(0..n + 5)).collect();
    let k = r.random_range(1..=n as usize + 3);
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    let expected = hits as f64 / relevant.len() as f64;
    lum_core::eval::recall_at_k(&ranked, &relevant, k).unwrap() == expected
}
