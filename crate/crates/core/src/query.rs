//! Knowledge querying against a trained LUM.
//!
//! Results persist in a versioned interest cache and an offline interest log.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{BehaviorEvent, Corpus, ItemAttributes, ItemId, UserId};
use crate::lum::LumModel;
use crate::nn::Tensor;
use crate::tokenize::{
    build_group_query_batch, tokenize_sequence, truncate, AttentionMaskSpec, ConditionFields,
    PackedBatch, Token, TokenizedSequence,
};
use crate::{LumError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeQuery {
    pub user_id: UserId,
    pub condition: ConditionFields,
}

impl KnowledgeQuery {
    pub fn new(user_id: UserId, condition: ConditionFields) -> Result<Self> {
        if condition.is_blank() {
            return Err(LumError::InvalidInput(
                "a knowledge query needs at least one condition field".into(),
            ));
        }
        Ok(Self { user_id, condition })
    }

    pub fn fingerprint(&self) -> u64 {
        condition_fingerprint(&self.condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// User-encoder output at the query condition.
    pub o: Vec<f32>,
    /// `(item_id, cosine)` by descending score, ties by ascending id.
    pub top_k: Vec<(ItemId, f32)>,
    pub model_version: String,
}

/// Stable 64-bit hash of the canonical form of a condition.
///
/// Query terms are sorted first: their embedding is a mean, so order never
/// changes the model's input.
pub fn condition_fingerprint(c: &ConditionFields) -> u64 {
    let mut terms = c.query_terms.clone();
    terms.sort_unstable();
    let canonical = format!(
        "category_id={};query_terms={:?};scenario_id={}",
        c.category_id, terms, c.scenario_id
    );
    let digest = Sha256::digest(canonical.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A frozen model plus its normalized item matrix.
pub struct QueryEngine<'m> {
    model: &'m LumModel<f32>,
    items: &'m [ItemAttributes],
    item_matrix: Tensor<f32>,
    version: String,
}

impl<'m> QueryEngine<'m> {
    pub fn new(model: &'m LumModel<f32>, items: &'m [ItemAttributes]) -> Result<Self> {
        let mut item_matrix = model.item_embeddings(items)?;
        for r in 0..item_matrix.rows() {
            let row = item_matrix.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n == 0.0 {
                return Err(LumError::ZeroNorm("item embedding"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            model,
            items,
            item_matrix,
            version: model.version(),
        })
    }

    pub fn model_version(&self) -> &str {
        &self.version
    }

    pub fn model(&self) -> &LumModel<f32> {
        self.model
    }

    /// Longest history prefix that leaves a trained position for the query.
    fn prefix(&self, history: &[BehaviorEvent]) -> Result<TokenizedSequence> {
        let seq = tokenize_sequence(history, self.items)?;
        truncate(&seq, self.model.config.max_sequence_tokens - 2)
    }

    /// Sequential oracle: history, then one condition, under a causal mask.
    pub fn query_single(
        &self,
        history: &[BehaviorEvent],
        query: &KnowledgeQuery,
        k: usize,
    ) -> Result<QueryResult> {
        check_k(k)?;
        check_user(history, std::slice::from_ref(query))?;
        let mut seq = self.prefix(history)?;
        seq.tokens.push(Token::Condition(query.condition.clone()));
        let n = seq.len();
        let batch = PackedBatch {
            tokens: seq.tokens.into_iter().map(Some).collect(),
            segment_ids: vec![0; n],
            position_ids: (0..n).collect(),
            loss_positions: vec![false; n],
            target_items: vec![None; n],
            segment_users: vec![seq.user_id],
        };
        let o = self.model.forward(&batch, &AttentionMaskSpec::causal(n))?;
        self.result(o.row(n - 1), k)
    }

    /// All queries in one pass over the shared prefix.
    pub fn query_group(
        &self,
        history: &[BehaviorEvent],
        queries: &[KnowledgeQuery],
        k: usize,
    ) -> Result<Vec<QueryResult>> {
        check_k(k)?;
        if queries.is_empty() {
            return Err(LumError::InvalidInput("query_group needs at least one query".into()));
        }
        check_user(history, queries)?;
        let prefix = self.prefix(history)?;
        let conditions: Vec<ConditionFields> = queries.iter().map(|q| q.condition.clone()).collect();
        let (batch, mask) = build_group_query_batch(&prefix, &conditions)?;
        let o = self.model.forward(&batch, &mask)?;
        (0..queries.len())
            .map(|j| self.result(o.row(prefix.len() + j), k))
            .collect()
    }

    /// The `k` catalog items closest to `o` by cosine.
    pub fn rank(&self, o: &[f32], k: usize) -> Result<Vec<(ItemId, f32)>> {
        let n = o.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n == 0.0 {
            return Err(LumError::ZeroNorm("query output"));
        }
        let q = Tensor::new(vec![1, o.len()], o.iter().map(|v| v / n).collect())?;
        let scores = self.item_matrix.matmul_nt(&q)?;
        let mut ranked: Vec<(ItemId, f32)> = scores
            .data()
            .iter()
            .enumerate()
            .map(|(i, &s)| (i as ItemId, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }

    fn result(&self, o: &[f32], k: usize) -> Result<QueryResult> {
        Ok(QueryResult {
            o: o.to_vec(),
            top_k: self.rank(o, k)?,
            model_version: self.version.clone(),
        })
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(LumError::InvalidInput("k must be >= 1".into()));
    }
    Ok(())
}

fn check_user(history: &[BehaviorEvent], queries: &[KnowledgeQuery]) -> Result<()> {
    let user = history.first().map_or(queries[0].user_id, |e| e.user_id);
    if let Some(q) = queries.iter().find(|q| q.user_id != user) {
        return Err(LumError::InvalidInput(format!(
            "query for user {} against the history of user {user}",
            q.user_id
        )));
    }
    Ok(())
}

pub fn query_single(
    model: &LumModel<f32>,
    items: &[ItemAttributes],
    history: &[BehaviorEvent],
    query: &KnowledgeQuery,
    k: usize,
) -> Result<QueryResult> {
    QueryEngine::new(model, items)?.query_single(history, query, k)
}

pub fn query_group(
    model: &LumModel<f32>,
    items: &[ItemAttributes],
    history: &[BehaviorEvent],
    queries: &[KnowledgeQuery],
    k: usize,
) -> Result<Vec<QueryResult>> {
    QueryEngine::new(model, items)?.query_group(history, queries, k)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub user_id: UserId,
    pub condition_fp: u64,
    pub model_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheSource {
    Realtime,
    OfflineFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub value: QueryResult,
    pub source: CacheSource,
    /// Logical insertion clock of the owning cache.
    pub inserted_at: u64,
}

#[derive(Default)]
struct Slot {
    realtime: Option<CacheEntry>,
    fallback: Option<CacheEntry>,
    last_access: AtomicU64,
}

impl Slot {
    fn best(&self) -> Option<&CacheEntry> {
        self.realtime.as_ref().or(self.fallback.as_ref())
    }
}

/// Versioned interest store: realtime results shadow offline fallbacks for
/// the same key. Readers share the lock; writers are exclusive.
pub struct InterestCache {
    slots: RwLock<HashMap<CacheKey, Slot>>,
    capacity: Option<usize>,
    clock: AtomicU64,
}

impl Default for InterestCache {
    fn default() -> Self {
        Self::new(None)
    }
}

impl InterestCache {
    /// `capacity` bounds the number of keys, evicting the least recently used.
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            slots: RwLock::new(HashMap::new()),
            capacity,
            clock: AtomicU64::new(0),
        }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn len(&self) -> usize {
        self.slots.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let slots = self.slots.read().expect("cache lock");
        let slot = slots.get(key)?;
        slot.last_access.store(self.tick(), Ordering::Relaxed);
        slot.best().cloned()
    }

    /// Stores `value` under `key`; returns the entry as stored.
    pub fn put(&self, key: CacheKey, value: QueryResult, source: CacheSource) -> CacheEntry {
        let now = self.tick();
        let entry = CacheEntry {
            key: key.clone(),
            value,
            source,
            inserted_at: now,
        };
        self.insert(entry.clone(), now);
        entry
    }

    fn insert(&self, entry: CacheEntry, now: u64) {
        let mut slots = self.slots.write().expect("cache lock");
        if let Some(cap) = self.capacity {
            if !slots.contains_key(&entry.key) && slots.len() >= cap.max(1) {
                let victim = slots
                    .iter()
                    .min_by_key(|(_, s)| s.last_access.load(Ordering::Relaxed))
                    .map(|(k, _)| k.clone());
                if let Some(v) = victim {
                    slots.remove(&v);
                }
            }
        }
        let slot = slots.entry(entry.key.clone()).or_default();
        slot.last_access.store(now, Ordering::Relaxed);
        match entry.source {
            CacheSource::Realtime => slot.realtime = Some(entry),
            CacheSource::OfflineFallback => slot.fallback = Some(entry),
        }
    }

    /// Preloads offline records as fallbacks.
    pub fn warm(&self, records: &[InterestRecord]) -> Result<usize> {
        for r in records {
            let (key, value) = r.to_key_value()?;
            self.put(key, value, CacheSource::OfflineFallback);
        }
        Ok(records.len())
    }

    /// Every stored entry (both sources), ordered by key then source.
    pub fn entries(&self) -> Vec<CacheEntry> {
        let slots = self.slots.read().expect("cache lock");
        let mut out: Vec<CacheEntry> = slots
            .values()
            .flat_map(|s| s.realtime.iter().chain(s.fallback.iter()).cloned())
            .collect();
        out.sort_by(|a, b| {
            (a.key.user_id, a.key.condition_fp, &a.key.model_version, a.source as u8).cmp(&(
                b.key.user_id,
                b.key.condition_fp,
                &b.key.model_version,
                b.source as u8,
            ))
        });
        out
    }

    /// Writes every entry as an interest record line.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let records: Vec<InterestRecord> = self
            .entries()
            .iter()
            .map(InterestRecord::from_entry)
            .collect();
        write_interest_log(path, &records)
    }

    /// Rebuilds a cache from [`InterestCache::persist`] output.
    pub fn load(path: &Path, capacity: Option<usize>) -> Result<Self> {
        let cache = Self::new(capacity);
        for r in read_interest_log(path)? {
            let (key, value) = r.to_key_value()?;
            cache.put(key, value, r.source.unwrap_or(CacheSource::OfflineFallback));
        }
        Ok(cache)
    }
}

/// One interest-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestRecord {
    pub user_id: UserId,
    /// 16 lowercase hex digits.
    pub condition_fp: String,
    pub model_version: String,
    pub o: Vec<f32>,
    pub top_k: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<CacheSource>,
}

/// Scores of `result`, unless any is non-finite (JSON has no NaN).
fn scores_of(result: &QueryResult) -> Option<Vec<f32>> {
    let scores: Vec<f32> = result.top_k.iter().map(|&(_, s)| s).collect();
    scores.iter().all(|s| s.is_finite()).then_some(scores)
}

pub fn format_fingerprint(fp: u64) -> String {
    format!("{fp:016x}")
}

pub fn parse_fingerprint(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16)
        .map_err(|e| LumError::InvalidInput(format!("bad condition fingerprint `{s}`: {e}")))
}

impl InterestRecord {
    pub fn new(user_id: UserId, condition_fp: u64, result: &QueryResult) -> Self {
        Self {
            user_id,
            condition_fp: format_fingerprint(condition_fp),
            model_version: result.model_version.clone(),
            o: result.o.clone(),
            top_k: result.top_k.iter().map(|&(i, _)| i).collect(),
            scores: scores_of(result),
            source: None,
        }
    }

    fn from_entry(e: &CacheEntry) -> Self {
        Self {
            source: Some(e.source),
            ..Self::new(e.key.user_id, e.key.condition_fp, &e.value)
        }
    }

    pub fn fingerprint(&self) -> Result<u64> {
        parse_fingerprint(&self.condition_fp)
    }

    /// Records without scores get NaN scores for their ranked items.
    pub fn to_key_value(&self) -> Result<(CacheKey, QueryResult)> {
        let scores = match &self.scores {
            Some(s) if s.len() == self.top_k.len() => s.clone(),
            Some(s) => {
                return Err(LumError::InvalidInput(format!(
                    "{} scores for {} ranked items",
                    s.len(),
                    self.top_k.len()
                )))
            }
            None => vec![f32::NAN; self.top_k.len()],
        };
        Ok((
            CacheKey {
                user_id: self.user_id,
                condition_fp: self.fingerprint()?,
                model_version: self.model_version.clone(),
            },
            QueryResult {
                o: self.o.clone(),
                top_k: self.top_k.iter().copied().zip(scores).collect(),
                model_version: self.model_version.clone(),
            },
        ))
    }
}

pub fn write_interest_log(path: &Path, records: &[InterestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_interest_log(path: &Path) -> Result<Vec<InterestRecord>> {
    if !path.exists() {
        return Err(LumError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "interest log not found; run `cache-warm` first".into(),
        });
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LumError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Group-queries every user of `corpus` with every condition and returns
/// the records ordered by `(user_id, fingerprint)`.
pub fn batch_infer_records(
    engine: &QueryEngine<'_>,
    corpus: &Corpus,
    conditions: &[ConditionFields],
    k: usize,
) -> Result<Vec<InterestRecord>> {
    let mut records = Vec::with_capacity(corpus.num_users() * conditions.len());
    for (&user, history) in &corpus.users {
        let queries = conditions
            .iter()
            .map(|c| KnowledgeQuery::new(user, c.clone()))
            .collect::<Result<Vec<_>>>()?;
        let results = engine.query_group(history, &queries, k)?;
        for (q, r) in queries.iter().zip(&results) {
            records.push((q.fingerprint(), InterestRecord::new(user, q.fingerprint(), r)));
        }
    }
    records.sort_by_key(|(fp, r)| (r.user_id, *fp));
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

pub fn batch_infer(
    engine: &QueryEngine<'_>,
    corpus: &Corpus,
    conditions: &[ConditionFields],
    k: usize,
    path: &Path,
) -> Result<Vec<InterestRecord>> {
    let records = batch_infer_records(engine, corpus, conditions, k)?;
    write_interest_log(path, &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(v: f32, version: &str) -> QueryResult {
        QueryResult {
            o: vec![v, 1.0],
            top_k: vec![(3, 0.9), (1, 0.5)],
            model_version: version.into(),
        }
    }

    fn key(user: UserId, version: &str) -> CacheKey {
        CacheKey {
            user_id: user,
            condition_fp: 42,
            model_version: version.into(),
        }
    }

    #[test]
    fn fingerprint_ignores_term_order() {
        let a = ConditionFields {
            scenario_id: 1,
            query_terms: vec![3, 1, 2],
            category_id: 4,
        };
        let b = ConditionFields {
            query_terms: vec![2, 3, 1],
            ..a.clone()
        };
        assert_eq!(condition_fingerprint(&a), condition_fingerprint(&b));
        assert_ne!(
            condition_fingerprint(&a),
            condition_fingerprint(&ConditionFields::scenario(1))
        );
    }

    #[test]
    fn blank_query_rejected() {
        assert!(KnowledgeQuery::new(1, ConditionFields::default()).is_err());
    }

    #[test]
    fn put_then_get() {
        let c = InterestCache::default();
        let e = c.put(key(1, "a"), result(0.5, "a"), CacheSource::Realtime);
        assert_eq!(c.get(&key(1, "a")), Some(e));
        assert_eq!(c.get(&key(1, "b")), None);
    }

    #[test]
    fn realtime_shadows_fallback() {
        let c = InterestCache::default();
        c.put(key(1, "a"), result(0.1, "a"), CacheSource::OfflineFallback);
        c.put(key(1, "a"), result(0.2, "a"), CacheSource::Realtime);
        c.put(key(1, "a"), result(0.3, "a"), CacheSource::OfflineFallback);
        let got = c.get(&key(1, "a")).unwrap();
        assert_eq!(got.source, CacheSource::Realtime);
        assert_eq!(got.value.o[0], 0.2);
    }

    #[test]
    fn lru_evicts_least_recent() {
        let c = InterestCache::new(Some(2));
        c.put(key(1, "a"), result(0.1, "a"), CacheSource::Realtime);
        c.put(key(2, "a"), result(0.2, "a"), CacheSource::Realtime);
        c.get(&key(1, "a"));
        c.put(key(3, "a"), result(0.3, "a"), CacheSource::Realtime);
        assert!(c.get(&key(1, "a")).is_some());
        assert!(c.get(&key(2, "a")).is_none());
        assert!(c.get(&key(3, "a")).is_some());
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = InterestCache::default();
        c.put(key(1, "a"), result(0.1, "a"), CacheSource::OfflineFallback);
        c.put(key(1, "a"), result(0.123_456_79, "a"), CacheSource::Realtime);
        c.put(key(2, "b"), result(-3.5e-7, "b"), CacheSource::Realtime);
        let p = dir.path().join("cache.jsonl");
        c.persist(&p).unwrap();
        let back = InterestCache::load(&p, None).unwrap();
        let strip = |v: Vec<CacheEntry>| {
            v.into_iter()
                .map(|e| (e.key, e.value, e.source))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(back.entries()), strip(c.entries()));
        let p2 = dir.path().join("cache2.jsonl");
        back.persist(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
