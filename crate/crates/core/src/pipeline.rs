//! End-to-end glue: the chronological three-way split, interest export and
//! the downstream experiments built on top of it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, ItemId, Vocabulary};
use crate::dlrm::{
    rank_train, retrieval_train, retrieve_top_k, DlrmConfig, FeatureBuilder, FeatureRecord,
    ItemEmbeddingTable, LumUsage, Ranker, RetrievalTowers,
};
use crate::datagen::chronological_split;
use crate::eval::{auc, recall_at_k, ScalingPoint};
use crate::lum::{train, FieldDims, LumConfig, LumModel};
use crate::nn::AttentionConfig;
use crate::query::{batch_infer_records, condition_fingerprint, InterestRecord, KnowledgeQuery, QueryEngine};
use crate::tokenize::ConditionFields;
use crate::{LumError, Result};

/// Chronological per-user split. The LUM and the interest log only ever see
/// `history`; downstream models train on `train` and are scored on `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamSplit {
    pub history: Corpus,
    pub train: Corpus,
    pub test: Corpus,
}

/// Holds out each user's last event for test and the `train_events` before it
/// for downstream training. Users with fewer than `train_events + 2` events
/// stay entirely in `history`.
pub fn downstream_split(corpus: &Corpus, train_events: usize) -> Result<DownstreamSplit> {
    if train_events == 0 {
        return Err(LumError::InvalidInput("train_events must be >= 1".into()));
    }
    let (mut history, mut train, mut test) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (&u, ev) in &corpus.users {
        if ev.len() < train_events + 2 {
            history.insert(u, ev.clone());
            continue;
        }
        let a = ev.len() - train_events - 1;
        let b = ev.len() - 1;
        history.insert(u, ev[..a].to_vec());
        train.insert(u, ev[a..b].to_vec());
        test.insert(u, ev[b..].to_vec());
    }
    if test.is_empty() {
        return Err(LumError::InvalidInput(format!(
            "no user has the {} events a downstream split needs",
            train_events + 2
        )));
    }
    Ok(DownstreamSplit {
        history: corpus.with_users(history),
        train: corpus.with_users(train),
        test: corpus.with_users(test),
    })
}

/// One query condition per known scenario, scenario 1 first.
pub fn scenario_conditions(vocab: &Vocabulary) -> Vec<ConditionFields> {
    (1..vocab.num_scenarios as u32).map(ConditionFields::scenario).collect()
}

/// What the downstream models read: the interest log, its condition order
/// and the item embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestArtifacts {
    pub records: Vec<InterestRecord>,
    pub condition_fps: Vec<u64>,
    pub items: ItemEmbeddingTable,
}

pub fn export_interests(
    model: &LumModel<f32>,
    history: &Corpus,
    conditions: &[ConditionFields],
    k: usize,
) -> Result<InterestArtifacts> {
    let engine = QueryEngine::new(model, &history.items)?;
    let records = batch_infer_records(&engine, history, conditions, k)?;
    let vectors = model
        .item_embeddings(&history.items)?
        .to_rows();
    Ok(InterestArtifacts {
        records,
        condition_fps: conditions.iter().map(condition_fingerprint).collect(),
        items: ItemEmbeddingTable {
            model_version: engine.model_version().to_string(),
            vectors,
        },
    })
}

fn builder<'a>(split: &'a DownstreamSplit, lum: Option<&InterestArtifacts>) -> Result<FeatureBuilder<'a>> {
    let b = FeatureBuilder::new(&split.history, &split.history);
    match lum {
        Some(a) => b.with_lum(&a.records, &a.condition_fps, &a.items),
        None => Ok(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub train_records: usize,
    pub test_records: usize,
}

/// Every user's events across the split, used to keep sampled negatives off
/// items the user engaged with at any time.
fn engaged(split: &DownstreamSplit) -> Corpus {
    split.history.with_users(
        split
            .history
            .users
            .iter()
            .map(|(&u, ev)| {
                let mut all = ev.clone();
                all.extend(split.train.history(u).iter().cloned());
                all.extend(split.test.history(u).iter().cloned());
                (u, all)
            })
            .collect(),
    )
}

/// Ranking records for `split.train` and `split.test`, negatives sampled per
/// `config`.
pub fn ranking_datasets(
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    config: &DlrmConfig,
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    let b = builder(split, lum)?;
    let exclude = engaged(split);
    let n = config.negatives_per_positive;
    let train = b.ranking_records(&split.train, &exclude, n, config.seed)?;
    let test = b.ranking_records(&split.test, &exclude, n, config.seed ^ 0x7e57)?;
    Ok((train, test))
}

/// AUC of `ranker` on the test records of `split`.
pub fn evaluate_ranker(
    ranker: &Ranker,
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
) -> Result<RankingMetrics> {
    let (train, test) = ranking_datasets(split, lum, &ranker.config)?;
    let scores: Vec<f64> = ranker.predict(&test)?.into_iter().map(f64::from).collect();
    let labels: Vec<u8> = test.iter().map(|r| r.label as u8).collect();
    Ok(RankingMetrics {
        auc: auc(&scores, &labels)?,
        train_records: train.len(),
        test_records: test.len(),
    })
}

/// Trains a ranker on `split.train` and reports its AUC on `split.test`.
pub fn train_ranker(
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    usage: LumUsage,
    config: &DlrmConfig,
) -> Result<(Ranker, RankingMetrics)> {
    let (train, _) = ranking_datasets(split, lum, config)?;
    let space = builder(split, lum)?.space();
    let ranker = rank_train(&train, space, usage, config)?;
    let metrics = evaluate_ranker(&ranker, split, lum)?;
    Ok((ranker, metrics))
}

pub fn ranking_experiment(
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    usage: LumUsage,
    config: &DlrmConfig,
) -> Result<RankingMetrics> {
    Ok(train_ranker(split, lum, usage, config)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at_k: f64,
    pub k: usize,
    pub test_users: usize,
}

/// Two-tower recall on each user's held-out event.
pub fn evaluate_retrieval(
    towers: &RetrievalTowers,
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    k: usize,
) -> Result<RetrievalMetrics> {
    let b = builder(split, lum)?;
    let test = b.retrieval_pairs(&split.test);
    let users: Vec<_> = test.iter().map(|(u, _)| u.clone()).collect();
    let ranked = retrieve_top_k(towers, &users, &b.catalog(), k)?;
    mean_recall(ranked.iter().map(|r| r.iter().map(|&(i, _)| i).collect()), test.iter().map(|&(_, i)| i), k, test.len())
}

/// Trains the two towers on `split.train`, with LUM inputs when `lum` is set.
pub fn train_retrieval(
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    config: &DlrmConfig,
    k: usize,
) -> Result<(RetrievalTowers, RetrievalMetrics)> {
    let b = builder(split, lum)?;
    let pairs: Vec<_> = b
        .retrieval_pairs(&split.train)
        .into_iter()
        .map(|(u, i)| (u, b.item(i)))
        .collect();
    let towers = retrieval_train(&pairs, b.space(), lum.is_some(), config)?;
    let metrics = evaluate_retrieval(&towers, split, lum, k)?;
    Ok((towers, metrics))
}

pub fn retrieval_experiment(
    split: &DownstreamSplit,
    lum: Option<&InterestArtifacts>,
    config: &DlrmConfig,
    k: usize,
) -> Result<RetrievalMetrics> {
    Ok(train_retrieval(split, lum, config, k)?.1)
}

fn mean_recall(
    ranked: impl Iterator<Item = Vec<ItemId>>,
    relevant: impl Iterator<Item = ItemId>,
    k: usize,
    n: usize,
) -> Result<RetrievalMetrics> {
    let mut total = 0.0;
    for (r, rel) in ranked.zip(relevant) {
        total += recall_at_k(&r, &BTreeSet::from([rel]), k)?;
    }
    Ok(RetrievalMetrics {
        recall_at_k: total / n.max(1) as f64,
        k,
        test_users: n,
    })
}

/// Recall of the LUM itself: query each test event's condition after the
/// user's history and look for the event's item in the top `k`.
pub fn lum_recall(model: &LumModel<f32>, history: &Corpus, test: &Corpus, k: usize) -> Result<RetrievalMetrics> {
    let engine = QueryEngine::new(model, &history.items)?;
    let mut ranked = Vec::new();
    let mut relevant = Vec::new();
    for (&u, events) in &test.users {
        for e in events {
            let q = KnowledgeQuery::new(
                u,
                ConditionFields {
                    scenario_id: e.scenario_id,
                    query_terms: e.query_terms.clone(),
                    category_id: e.category_id,
                },
            )?;
            let r = engine.query_single(history.history(u), &q, k)?;
            ranked.push(r.top_k.iter().map(|&(i, _)| i).collect());
            relevant.push(e.item_id);
        }
    }
    let n = relevant.len();
    mean_recall(ranked.into_iter(), relevant.into_iter(), k, n)
}

/// `base` resized to width `model_dim`: two heads, an MLP twice as wide and
/// field embeddings half as wide. Layer count is kept.
pub fn sized_lum_config(base: &LumConfig, model_dim: usize) -> LumConfig {
    LumConfig {
        attention: AttentionConfig {
            model_dim,
            num_heads: 2,
            num_layers: base.attention.num_layers,
            mlp_hidden_dim: 2 * model_dim,
        },
        field_dims: FieldDims::uniform((model_dim / 2).max(1)),
        ..base.clone()
    }
}

/// Trains one LUM per width on all but the last `holdout` events of each user
/// and measures LUM retrieval R@`k` on the held-out events. Points are
/// (parameter count, recall).
pub fn scaling_sweep_sizes(
    corpus: &Corpus,
    base: &LumConfig,
    model_dims: &[usize],
    holdout: usize,
    k: usize,
) -> Result<Vec<ScalingPoint>> {
    let (history, test) = chronological_split(corpus, holdout)?;
    model_dims
        .iter()
        .map(|&d| {
            let (model, _) = train(&history, &sized_lum_config(base, d))?;
            let r = lum_recall(&model, &history, &test, k)?;
            Ok(ScalingPoint {
                x: model.num_parameters() as f64,
                y: r.recall_at_k,
            })
        })
        .collect()
}

/// Same protocol as [`scaling_sweep_sizes`], varying the token budget.
/// Points are (sequence length, recall).
pub fn scaling_sweep_lengths(
    corpus: &Corpus,
    base: &LumConfig,
    lengths: &[usize],
    holdout: usize,
    k: usize,
) -> Result<Vec<ScalingPoint>> {
    let (history, test) = chronological_split(corpus, holdout)?;
    lengths
        .iter()
        .map(|&n| {
            let cfg = LumConfig {
                max_sequence_tokens: n,
                ..base.clone()
            };
            let (model, _) = train(&history, &cfg)?;
            let r = lum_recall(&model, &history, &test, k)?;
            Ok(ScalingPoint {
                x: n as f64,
                y: r.recall_at_k,
            })
        })
        .collect()
}
