//! Reference semantics for the interest cache.

use std::collections::HashMap;

use rand::Rng;

use lum_core::query::{CacheKey, CacheSource, InterestCache, QueryResult};

use super::rng;

pub fn result(r: &mut impl Rng, version: &str) -> QueryResult {
    let mut top: Vec<(u32, f32)> = (0..3).map(|i| (i, r.random::<f32>())).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    QueryResult {
        o: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
        top_k: top,
        model_version: version.into(),
    }
}

/// Per key, the latest realtime entry shadows the latest fallback entry.
#[derive(Default)]
pub struct Reference {
    slots: HashMap<CacheKey, (Option<QueryResult>, Option<QueryResult>)>,
}

impl Reference {
    pub fn put(&mut self, k: CacheKey, v: QueryResult, s: CacheSource) {
        let slot = self.slots.entry(k).or_default();
        match s {
            CacheSource::Realtime => slot.0 = Some(v),
            CacheSource::OfflineFallback => slot.1 = Some(v),
        }
    }

    pub fn get(&self, k: &CacheKey) -> Option<(QueryResult, CacheSource)> {
        let (rt, fb) = self.slots.get(k)?;
        rt.clone()
            .map(|v| (v, CacheSource::Realtime))
            .or_else(|| fb.clone().map(|v| (v, CacheSource::OfflineFallback)))
    }
}

fn strip(c: &InterestCache) -> Vec<(CacheKey, QueryResult, CacheSource)> {
    c.entries().into_iter().map(|e| (e.key, e.value, e.source)).collect()
}

/// Runs `ops` random cache operations, persist/reload cycles included,
/// against the reference. Keys span two model versions. Returns the first disagreement.
pub fn run_against_reference(seed: u64, ops: usize) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("cache.jsonl");
    let mut r = rng(seed);
    let mut cache = InterestCache::new(None);
    let mut reference = Reference::default();
    for op in 0..ops {
        let version = ["v1", "v2"][r.random_range(0..2)];
        let key = CacheKey {
            user_id: r.random_range(0..5),
            condition_fp: r.random_range(0..4),
            model_version: version.into(),
        };
        match r.random_range(0..10) {
            0..=3 => {
                let source = if r.random_bool(0.5) {
                    CacheSource::Realtime
                } else {
                    CacheSource::OfflineFallback
                };
                let v = result(&mut r, version);
                let stored = cache.put(key.clone(), v.clone(), source);
                reference.put(key.clone(), v.clone(), source);
                if stored.value != v {
                    return Err(format!("op {op}: put returned another value"));
                }
                let got = cache.get(&key).map(|e| (e.value, e.source));
                if got != reference.get(&key) {
                    return Err(format!("op {op}: get after put disagrees"));
                }
            }
            4 => {
                cache.persist(&path).map_err(|e| e.to_string())?;
                let reloaded = InterestCache::load(&path, None).map_err(|e| e.to_string())?;
                if strip(&reloaded) != strip(&cache) {
                    return Err(format!("op {op}: reload changed the cache"));
                }
                cache = reloaded;
            }
            _ => {
                let got = cache.get(&key);
                if got.as_ref().is_some_and(|e| e.key != key || e.value.model_version != key.model_version) {
                    return Err(format!("op {op}: entry of another key or version"));
                }
                if got.map(|e| (e.value, e.source)) != reference.get(&key) {
                    return Err(format!("op {op}: get disagrees"));
                }
            }
        }
    }
    Ok(())
}
