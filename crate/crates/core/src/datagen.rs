//! Behavior corpora and their on-disk form.
//!
//! The synthetic world generator gives conditions a tunable amount of signal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{LumError, Result};

pub type UserId = u32;
pub type ItemId = u32;

/// Scenario id reserved for "unknown".
pub const UNKNOWN_SCENARIO: u32 = 0;
/// Category id reserved for "unknown / not part of the condition".
pub const UNKNOWN_CATEGORY: u32 = 0;

pub const EVENTS_HEADER: [&str; 6] = [
    "user_id",
    "item_id",
    "scenario_id",
    "category_id",
    "query_terms",
    "timestamp",
];

/// One user–item interaction and the condition it happened under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub scenario_id: u32,
    pub query_terms: Vec<u32>,
    pub category_id: u32,
    pub timestamp: u64,
}

impl BehaviorEvent {
    fn order_key(&self) -> (u64, ItemId) {
        (self.timestamp, self.item_id)
    }
}

/// Sorts by timestamp, ties broken by item id.
pub fn sort_events(events: &mut [BehaviorEvent]) {
    events.sort_by_key(BehaviorEvent::order_key);
}

pub fn is_sorted(events: &[BehaviorEvent]) -> bool {
    events
        .windows(2)
        .all(|w| w[0].order_key() <= w[1].order_key())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAttributes {
    pub category_id: u32,
    /// Popularity score in `[0, 1]`.
    pub popularity: f32,
    pub content: Vec<f32>,
}

/// Vocabulary sizes of every categorical field. Ids are dense in `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_items: usize,
    pub num_scenarios: usize,
    pub num_categories: usize,
    pub num_query_terms: usize,
    pub content_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Per-user events, each group sorted ascending by `(timestamp, item_id)`.
    pub users: BTreeMap<UserId, Vec<BehaviorEvent>>,
    /// Attribute table indexed by item id.
    pub items: Vec<ItemAttributes>,
    pub vocab: Vocabulary,
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn num_events(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_events() == 0
    }

    pub fn events(&self) -> impl Iterator<Item = &BehaviorEvent> {
        self.users.values().flatten()
    }

    pub fn history(&self, user: UserId) -> &[BehaviorEvent] {
        self.users.get(&user).map_or(&[], Vec::as_slice)
    }

    /// Same items and vocabulary, different event set.
    pub fn with_users(&self, users: BTreeMap<UserId, Vec<BehaviorEvent>>) -> Corpus {
        Corpus {
            users,
            items: self.items.clone(),
            vocab: self.vocab,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.len() != self.vocab.num_items {
            return Err(LumError::InvalidInput(format!(
                "item table has {} rows, vocabulary declares {}",
                self.items.len(),
                self.vocab.num_items
            )));
        }
        for (user, events) in &self.users {
            if !is_sorted(events) {
                return Err(LumError::InvalidInput(format!(
                    "events of user {user} are not chronological"
                )));
            }
            for e in events {
                if e.user_id != *user {
                    return Err(LumError::InvalidInput(format!(
                        "event of user {} filed under user {user}",
                        e.user_id
                    )));
                }
                if e.item_id as usize >= self.items.len() {
                    return Err(LumError::OutOfVocabulary {
                        field: "item_id",
                        value: e.item_id as usize,
                        vocab: self.items.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes `events.csv`, `items.csv` and `meta.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("events.csv"))?;
        w.write_record(EVENTS_HEADER)?;
        for e in self.events() {
            w.write_record([
                e.user_id.to_string(),
                e.item_id.to_string(),
                e.scenario_id.to_string(),
                e.category_id.to_string(),
                join_ids(&e.query_terms),
                e.timestamp.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("items.csv"))?;
        w.write_record(["item_id", "category_id", "popularity", "content"])?;
        for (id, item) in self.items.iter().enumerate() {
            let content = item
                .content
                .iter()
                .map(f32::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([
                id.to_string(),
                item.category_id.to_string(),
                item.popularity.to_string(),
                content,
            ])?;
        }
        w.flush()?;

        let meta = CorpusMeta {
            vocab: self.vocab,
            seed: self.seed,
            num_users: self.num_users(),
            num_events: self.num_events(),
        };
        fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(LumError::MissingArtifact {
                path: meta_path,
                hint: "corpus directory is incomplete; run `gen-data` first".into(),
            });
        }
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let events = load_interactions(&dir.join("events.csv"))?;
        let items = load_items(&dir.join("items.csv"))?;
        let corpus = Corpus {
            users: events.users,
            items,
            vocab: meta.vocab,
            seed: meta.seed,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    vocab: Vocabulary,
    seed: Option<u64>,
    num_users: usize,
    num_events: usize,
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenarios: usize,
    pub num_categories: usize,
    pub latent_dim: usize,
    pub events_per_user_range: [usize; 2],
    pub condition_effect_strength: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_users: 400,
            num_items: 300,
            num_scenarios: 2,
            num_categories: 12,
            latent_dim: 8,
            events_per_user_range: [12, 40],
            condition_effect_strength: 2.0,
            rng_seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_scenarios", self.num_scenarios),
            ("num_categories", self.num_categories),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LumError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        let [lo, hi] = self.events_per_user_range;
        if lo > hi {
            return Err(LumError::InvalidConfig(format!(
                "events_per_user_range lower bound {lo} exceeds upper bound {hi}"
            )));
        }
        if !(self.condition_effect_strength >= 0.0) {
            return Err(LumError::InvalidConfig(
                "condition_effect_strength must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Logit scale applied to user–item affinities when sampling items.
const AFFINITY_SHARPNESS: f64 = 3.0;
const ITEM_LATENT_NOISE: f64 = 0.5;
const CONTENT_NOISE: f64 = 0.3;
const POPULARITY_LOGIT_STD: f64 = 0.5;

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rotates consecutive coordinate pairs `(2j, 2j+1)` by `angles[j]`.
fn rotate_pairs(v: &[f64], angles: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (j, &a) in angles.iter().enumerate() {
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        let (s, c) = a.sin_cos();
        out[2 * j] = c * x - s * y;
        out[2 * j + 1] = s * x + c * y;
    }
    out
}

/// Samples a synthetic corpus.
///
/// Every user has a latent vector; under scenario `s` it is rotated pairwise by
/// angles `strength * phi[s]`, with `phi` uniform in `[-pi/2, pi/2]`. Items cluster
/// around per-category centroids and each event's item is drawn from the softmax
/// of the rotated-user/item affinity plus a popularity prior. Scenario ids start at
/// 1 and category ids at 1; 0 is reserved in both vocabularies.
pub fn generate_synthetic_corpus(config: &SyntheticWorldConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let d = config.latent_dim;

    let centroids: Vec<Vec<f64>> = (0..config.num_categories)
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut item_latent = Vec::with_capacity(config.num_items);
    let mut item_prior = Vec::with_capacity(config.num_items);
    let mut items = Vec::with_capacity(config.num_items);
    for _ in 0..config.num_items {
        let cat = rng.random_range(0..config.num_categories);
        let latent: Vec<f64> = centroids[cat]
            .iter()
            .map(|&c| c + ITEM_LATENT_NOISE * normal(&mut rng))
            .collect();
        let content = latent
            .iter()
            .map(|&x| (x + CONTENT_NOISE * normal(&mut rng)) as f32)
            .collect();
        item_prior.push(POPULARITY_LOGIT_STD * normal(&mut rng));
        items.push(ItemAttributes {
            category_id: cat as u32 + 1,
            popularity: 0.0,
            content,
        });
        item_latent.push(latent);
    }

    let half_pi = std::f64::consts::FRAC_PI_2;
    let scenario_angles: Vec<Vec<f64>> = (0..config.num_scenarios)
        .map(|_| {
            (0..d / 2)
                .map(|_| config.condition_effect_strength * rng.random_range(-half_pi..half_pi))
                .collect()
        })
        .collect();

    let user_scale = 1.0 / (d as f64).sqrt();
    let [lo, hi] = config.events_per_user_range;
    let mut users = BTreeMap::new();
    let mut counts = vec![0usize; config.num_items];
    let mut logits = vec![0.0f64; config.num_items];
    for user in 0..config.num_users as UserId {
        let latent: Vec<f64> = (0..d).map(|_| user_scale * normal(&mut rng)).collect();
        let per_scenario: Vec<Vec<f64>> = scenario_angles
            .iter()
            .map(|angles| rotate_pairs(&latent, angles))
            .collect();
        let n = rng.random_range(lo..=hi);
        let mut ts: u64 = rng.random_range(0..1_000_000);
        let mut events = Vec::with_capacity(n);
        for _ in 0..n {
            ts += rng.random_range(1..3_600);
            let s = rng.random_range(0..config.num_scenarios);
            let u = &per_scenario[s];
            for (i, l) in logits.iter_mut().enumerate() {
                let dot: f64 = u.iter().zip(&item_latent[i]).map(|(a, b)| a * b).sum();
                *l = AFFINITY_SHARPNESS * dot + item_prior[i];
            }
            let item = sample_softmax(&logits, &mut rng);
            counts[item] += 1;
            events.push(BehaviorEvent {
                user_id: user,
                item_id: item as ItemId,
                scenario_id: s as u32 + 1,
                query_terms: Vec::new(),
                category_id: UNKNOWN_CATEGORY,
                timestamp: ts,
            });
        }
        sort_events(&mut events);
        if !events.is_empty() {
            users.insert(user, events);
        }
    }

    set_popularity(&mut items, &counts);
    let corpus = Corpus {
        users,
        items,
        vocab: Vocabulary {
            num_items: config.num_items,
            num_scenarios: config.num_scenarios + 1,
            num_categories: config.num_categories + 1,
            num_query_terms: 1,
            content_dim: d,
        },
        seed: Some(config.rng_seed),
    };
    Ok(corpus)
}

fn sample_softmax(logits: &[f64], rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, l) in logits.iter().enumerate() {
        u -= (l - max).exp();
        if u <= 0.0 {
            return i;
        }
    }
    logits.len() - 1
}

fn set_popularity(items: &mut [ItemAttributes], counts: &[usize]) {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f32;
    for (item, &c) in items.iter_mut().zip(counts) {
        item.popularity = c as f32 / max;
    }
}

/// A world where the next item is a deterministic function of the condition.
///
/// Conditions carry a category id `c` in `1..=num_conditions`; the item engaged
/// under condition `c` is always item `c - 1`. Additional distractor items fill the
/// catalog up to `2 * num_conditions`.
pub fn generate_condition_mapped_corpus(
    num_users: usize,
    num_conditions: usize,
    events_per_user: usize,
    seed: u64,
) -> Result<Corpus> {
    if num_users == 0 || num_conditions == 0 || events_per_user == 0 {
        return Err(LumError::InvalidConfig(
            "mapped corpus needs at least one user, condition and event".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_items = 2 * num_conditions;
    let content_dim = 4;
    let mut items = Vec::with_capacity(num_items);
    for i in 0..num_items {
        items.push(ItemAttributes {
            category_id: (i % num_conditions) as u32 + 1,
            popularity: 0.0,
            content: (0..content_dim).map(|_| normal(&mut rng) as f32).collect(),
        });
    }
    let mut counts = vec![0usize; num_items];
    let mut users = BTreeMap::new();
    for user in 0..num_users as UserId {
        let mut ts = rng.random_range(0..1_000u64);
        let events: Vec<_> = (0..events_per_user)
            .map(|_| {
                ts += 1 + rng.random_range(0..10u64);
                let c = rng.random_range(1..=num_conditions as u32);
                counts[c as usize - 1] += 1;
                BehaviorEvent {
                    user_id: user,
                    item_id: c - 1,
                    scenario_id: 1,
                    query_terms: Vec::new(),
                    category_id: c,
                    timestamp: ts,
                }
            })
            .collect();
        users.insert(user, events);
    }
    set_popularity(&mut items, &counts);
    Ok(Corpus {
        users,
        items,
        vocab: Vocabulary {
            num_items,
            num_scenarios: 2,
            num_categories: num_conditions + 1,
            num_query_terms: 1,
            content_dim,
        },
        seed: Some(seed),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> LumError {
    LumError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    name: &str,
    raw: &str,
) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name}: `{raw}` is not a valid integer")))
}

fn parse_terms(path: &Path, line: usize, raw: &str) -> Result<Vec<u32>> {
    raw.split_whitespace()
        .map(|t| parse_field(path, line, "query_terms", t))
        .collect()
}

/// Loads an interaction log with header
/// `user_id,item_id,scenario_id,category_id,query_terms,timestamp`.
///
/// `query_terms` is a space separated id list and may be empty. A blank or
/// `unknown` scenario maps to [`UNKNOWN_SCENARIO`]. The item table is derived from
/// the log: an item's category is the category of its first row and popularity is
/// its interaction count relative to the most frequent item.
pub fn load_interactions(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(LumError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "interaction log not found".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_err(path, 1, "empty file, expected a header row")),
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != EVENTS_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("header {names:?} does not match {EVENTS_HEADER:?}"),
        ));
    }

    let mut users: BTreeMap<UserId, Vec<BehaviorEvent>> = BTreeMap::new();
    let mut item_category: BTreeMap<ItemId, u32> = BTreeMap::new();
    let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
    let mut max_scenario = 0;
    let mut max_category = 0;
    let mut max_term = 0;
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != EVENTS_HEADER.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} columns, found {}", EVENTS_HEADER.len(), record.len()),
            ));
        }
        let user_id: UserId = parse_field(path, line, "user_id", &record[0])?;
        let item_id: ItemId = parse_field(path, line, "item_id", &record[1])?;
        let raw_scenario = record[2].trim();
        let scenario_id = if raw_scenario.is_empty() || raw_scenario.eq_ignore_ascii_case("unknown")
        {
            UNKNOWN_SCENARIO
        } else {
            parse_field(path, line, "scenario_id", raw_scenario)?
        };
        let category_id: u32 = parse_field(path, line, "category_id", &record[3])?;
        let query_terms = parse_terms(path, line, &record[4])?;
        let timestamp: u64 = parse_field(path, line, "timestamp", &record[5])?;

        max_scenario = max_scenario.max(scenario_id);
        max_category = max_category.max(category_id);
        max_term = query_terms.iter().copied().fold(max_term, u32::max);
        item_category.entry(item_id).or_insert(category_id);
        *counts.entry(item_id).or_default() += 1;
        users.entry(user_id).or_default().push(BehaviorEvent {
            user_id,
            item_id,
            scenario_id,
            query_terms,
            category_id,
            timestamp,
        });
    }
    for events in users.values_mut() {
        sort_events(events);
    }

    let num_items = item_category.keys().next_back().map_or(0, |&m| m as usize + 1);
    let mut items = vec![
        ItemAttributes {
            category_id: UNKNOWN_CATEGORY,
            popularity: 0.0,
            content: Vec::new(),
        };
        num_items
    ];
    let mut dense_counts = vec![0usize; num_items];
    for (&id, &cat) in &item_category {
        items[id as usize].category_id = cat;
        dense_counts[id as usize] = counts[&id];
    }
    set_popularity(&mut items, &dense_counts);
    Ok(Corpus {
        users,
        items,
        vocab: Vocabulary {
            num_items,
            num_scenarios: max_scenario as usize + 1,
            num_categories: max_category as usize + 1,
            num_query_terms: max_term as usize + 1,
            content_dim: 0,
        },
        seed: None,
    })
}

fn load_items(path: &Path) -> Result<Vec<ItemAttributes>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(parse_err(path, line, "expected 4 columns"));
        }
        let id: usize = parse_field(path, line, "item_id", &record[0])?;
        if id != items.len() {
            return Err(parse_err(path, line, "item ids must be dense and ascending"));
        }
        let category_id = parse_field(path, line, "category_id", &record[1])?;
        let popularity = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, "popularity is not a number"))?;
        let content = record[3]
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| parse_err(path, line, "content value is not a number"))
            })
            .collect::<Result<_>>()?;
        items.push(ItemAttributes {
            category_id,
            popularity,
            content,
        });
    }
    Ok(items)
}

/// Moves each user's last `holdout_last_n` events into the test split.
///
/// Users with at most `holdout_last_n` events stay entirely in train.
pub fn chronological_split(corpus: &Corpus, holdout_last_n: usize) -> Result<(Corpus, Corpus)> {
    if holdout_last_n == 0 {
        return Err(LumError::InvalidInput("holdout_last_n must be >= 1".into()));
    }
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (&user, events) in &corpus.users {
        if events.len() > holdout_last_n {
            let cut = events.len() - holdout_last_n;
            train.insert(user, events[..cut].to_vec());
            test.insert(user, events[cut..].to_vec());
        } else {
            train.insert(user, events.clone());
        }
    }
    Ok((corpus.with_users(train), corpus.with_users(test)))
}
