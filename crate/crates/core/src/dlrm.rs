//! Downstream discriminative models: a two-tower retriever and an
//! Embedding+MLP CTR ranker, each optionally fed with LUM interests.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, ItemAttributes, ItemId, UserId};
use crate::nn::ops::cosine;
use crate::nn::{checkpoint, AdamConfig, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::query::{condition_fingerprint, parse_fingerprint, InterestRecord};
use crate::tokenize::{condition_of, popularity_bucket, ConditionFields, POPULARITY_BUCKETS};
use crate::{LumError, Result};

/// Query conditions per user: one per scenario of the synthetic world.
pub const DEFAULT_NUM_CONDITIONS: usize = 2;

/// Number of aggregate user statistics in [`UserContext::stats`].
pub const USER_STATS_DIM: usize = 2;

/// `sim(o, e)` between a queried interest and an item embedding.
pub fn interest_matching(o: &[f32], e: &[f32]) -> Result<f32> {
    cosine(o, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item_id: ItemId,
    pub category_id: u32,
    pub popularity_bucket: u32,
    pub content: Vec<f32>,
    /// Unit-normalized LUM item embedding `e^i`.
    pub lum_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LumInterests {
    /// One unit-normalized vector per query condition, in condition order.
    /// All zeros when `present` is false.
    pub vectors: Vec<Vec<f32>>,
    pub present: bool,
    /// Index of the queried condition equal to the request's own condition.
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub user_id: UserId,
    pub stats: Vec<f32>,
    pub scenario_id: u32,
    pub query_terms: Vec<u32>,
    pub interests: Option<LumInterests>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub user: UserContext,
    pub item: ItemFeatures,
    /// `sim(o_n, e^i)` per condition, then the score of the interest queried
    /// under the request's own condition. Zero where no interest applies.
    pub match_scores: Option<Vec<f32>>,
    pub label: f32,
}

/// Vocabulary sizes and LUM feature shape seen by the downstream models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_scenarios: usize,
    pub num_query_terms: usize,
    pub content_dim: usize,
    /// `(N, model_dim)` when LUM features are available.
    pub lum: Option<(usize, usize)>,
}

/// LUM item embeddings exported next to the interest log, so downstream
/// training needs no access to the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddingTable {
    pub model_version: String,
    pub vectors: Vec<Vec<f32>>,
}

impl ItemEmbeddingTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LumError::MissingArtifact {
                path: path.to_path_buf(),
                hint: "item embedding table not found; run `cache-warm` first".into(),
            });
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Turns events into [`FeatureRecord`]s. User statistics and interests come
/// from the history the LUM saw, never from the events being featurized.
#[derive(Debug, Clone)]
pub struct FeatureBuilder<'a> {
    items: &'a [ItemAttributes],
    space: FeatureSpace,
    stats: HashMap<UserId, Vec<f32>>,
    interests: Option<HashMap<UserId, Vec<Vec<f32>>>>,
    condition_fps: Vec<u64>,
    item_lum: Option<Vec<Vec<f32>>>,
}

impl<'a> FeatureBuilder<'a> {
    /// `history` supplies user statistics; `full` bounds the vocabularies.
    pub fn new(history: &Corpus, full: &'a Corpus) -> Self {
        let stats = history
            .users
            .iter()
            .map(|(&u, ev)| {
                let pop = ev
                    .iter()
                    .map(|e| full.items[e.item_id as usize].popularity)
                    .sum::<f32>()
                    / ev.len().max(1) as f32;
                (u, vec![(1.0 + ev.len() as f32).ln() / 4.0, pop])
            })
            .collect();
        let num_users = full.users.keys().next_back().map_or(0, |&u| u as usize + 1);
        Self {
            items: &full.items,
            space: FeatureSpace {
                num_users,
                num_items: full.vocab.num_items,
                num_categories: full.vocab.num_categories,
                num_scenarios: full.vocab.num_scenarios,
                num_query_terms: full.vocab.num_query_terms,
                content_dim: full.vocab.content_dim,
                lum: None,
            },
            stats,
            interests: None,
            condition_fps: Vec::new(),
            item_lum: None,
        }
    }

    /// Attaches interest-log vectors, ordered by `condition_fps`, and the
    /// LUM item table. Users without records get the zero fallback.
    pub fn with_lum(
        mut self,
        records: &[InterestRecord],
        condition_fps: &[u64],
        table: &ItemEmbeddingTable,
    ) -> Result<Self> {
        if condition_fps.is_empty() {
            return Err(LumError::InvalidInput("LUM features need at least one condition".into()));
        }
        let dim = table.vectors.first().map_or(0, Vec::len);
        if dim == 0 || table.vectors.len() != self.items.len() {
            return Err(LumError::Shape(format!(
                "item embedding table has {} rows of width {dim}, catalog has {} items",
                table.vectors.len(),
                self.items.len()
            )));
        }
        if let Some(v) = table.vectors.iter().find(|v| v.len() != dim) {
            return Err(LumError::Shape(format!(
                "item embedding rows of width {} and {dim}",
                v.len()
            )));
        }
        let slot_of: HashMap<u64, usize> =
            condition_fps.iter().enumerate().map(|(i, &fp)| (fp, i)).collect();
        let mut interests: HashMap<UserId, Vec<Vec<f32>>> = HashMap::new();
        for r in records {
            if r.o.len() != dim {
                return Err(LumError::Shape(format!(
                    "interest vector of width {} for user {}, item table has width {dim}",
                    r.o.len(),
                    r.user_id
                )));
            }
            let Some(&slot) = slot_of.get(&parse_fingerprint(&r.condition_fp)?) else {
                continue;
            };
            let entry = interests
                .entry(r.user_id)
                .or_insert_with(|| vec![vec![0.0; dim]; condition_fps.len()]);
            entry[slot] = unit(&r.o);
        }
        self.space.lum = Some((condition_fps.len(), dim));
        self.interests = Some(interests);
        self.condition_fps = condition_fps.to_vec();
        self.item_lum = Some(table.vectors.iter().map(|v| unit(v)).collect());
        Ok(self)
    }

    pub fn space(&self) -> FeatureSpace {
        self.space
    }

    pub fn item(&self, id: ItemId) -> ItemFeatures {
        let a = &self.items[id as usize];
        ItemFeatures {
            item_id: id,
            category_id: a.category_id,
            popularity_bucket: popularity_bucket(a.popularity),
            content: a.content.clone(),
            lum_embedding: self.item_lum.as_ref().map(|t| t[id as usize].clone()),
        }
    }

    /// Features of a request by `user_id` under `condition`.
    pub fn context(&self, user_id: UserId, condition: &ConditionFields) -> UserContext {
        let interests = self.interests.as_ref().map(|all| {
            let (n, dim) = self.space.lum.expect("lum shape");
            let fp = condition_fingerprint(condition);
            let matched = self.condition_fps.iter().position(|&c| c == fp);
            match all.get(&user_id) {
                Some(v) => LumInterests {
                    vectors: v.clone(),
                    present: true,
                    matched,
                },
                None => LumInterests {
                    vectors: vec![vec![0.0; dim]; n],
                    present: false,
                    matched,
                },
            }
        });
        UserContext {
            user_id,
            stats: self
                .stats
                .get(&user_id)
                .cloned()
                .unwrap_or_else(|| vec![0.0; USER_STATS_DIM]),
            scenario_id: condition.scenario_id,
            query_terms: condition.query_terms.clone(),
            interests,
        }
    }

    pub fn record(&self, user: UserContext, item: ItemId, label: f32) -> Result<FeatureRecord> {
        let item = self.item(item);
        let match_scores = match (&user.interests, &item.lum_embedding) {
            (Some(int), Some(e)) => {
                let mut s = int
                    .vectors
                    .iter()
                    .map(|o| if int.present { interest_matching(o, e) } else { Ok(0.0) })
                    .collect::<Result<Vec<_>>>()?;
                let own = int.matched.filter(|_| int.present).map_or(0.0, |m| s[m]);
                s.push(own);
                Some(s)
            }
            _ => None,
        };
        Ok(FeatureRecord {
            user,
            item,
            match_scores,
            label,
        })
    }

    /// Each event becomes a positive plus `negatives_per_positive` items the
    /// user never engaged with in `exclude`, drawn uniformly.
    pub fn ranking_records(
        &self,
        events: &Corpus,
        exclude: &Corpus,
        negatives_per_positive: usize,
        seed: u64,
    ) -> Result<Vec<FeatureRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_items = self.items.len() as ItemId;
        let mut out = Vec::new();
        for (&user, evs) in &events.users {
            let seen: BTreeSet<ItemId> = exclude
                .history(user)
                .iter()
                .chain(evs)
                .map(|e| e.item_id)
                .collect();
            if seen.len() >= self.items.len() {
                return Err(LumError::InvalidInput(format!(
                    "user {user} engaged with every item; no negatives to sample"
                )));
            }
            for e in evs {
                let ctx = self.context(user, &condition_of(e));
                out.push(self.record(ctx.clone(), e.item_id, 1.0)?);
                for _ in 0..negatives_per_positive {
                    let neg = loop {
                        let c = rng.random_range(0..n_items);
                        if !seen.contains(&c) {
                            break c;
                        }
                    };
                    out.push(self.record(ctx.clone(), neg, 0.0)?);
                }
            }
        }
        Ok(out)
    }

    /// Positive `(context, item)` pairs for retrieval training or evaluation.
    pub fn retrieval_pairs(&self, events: &Corpus) -> Vec<(UserContext, ItemId)> {
        events
            .events()
            .map(|e| (self.context(e.user_id, &condition_of(e)), e.item_id))
            .collect()
    }

    /// Item features for the whole catalog.
    pub fn catalog(&self) -> Vec<ItemFeatures> {
        (0..self.items.len() as ItemId).map(|i| self.item(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlrmConfig {
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Output width of both retrieval towers.
    pub tower_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    /// Softmax temperature of the retrieval loss over tower dot products.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DlrmConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden_dims: vec![64, 32],
            tower_dim: 32,
            learning_rate: 3e-3,
            epochs: 8,
            batch_size: 128,
            negatives_per_positive: 4,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl DlrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.tower_dim == 0 || self.batch_size == 0 {
            return Err(LumError::InvalidConfig(
                "embedding_dim, tower_dim and batch_size must be >= 1".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(LumError::InvalidConfig("hidden dims must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(LumError::InvalidConfig(
                "learning_rate and temperature must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// How a ranker consumes LUM outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LumUsage {
    None,
    /// Interest vectors and the item embedding as extra inputs.
    Direct,
    /// Direct features plus the interest-matching scores.
    DirectAndMatching,
}

/// Embedding tables and MLPs addressed by parameter name.
#[derive(Debug, Clone)]
struct Net {
    params: ParameterStore<f32>,
}

impl Net {
    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("parameter `{name}` exists"))
    }

    fn add_table(&mut self, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.params
            .add(name, Tensor::randn(&[rows.max(1), dim], 0.1, rng))
            .map(|_| ())
    }

    fn add_mlp(&mut self, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
        for (l, w) in dims.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            self.params
                .add(format!("{name}.{l}.w"), Tensor::randn(&[w[0], w[1]], std, rng))?;
            self.params
                .add(format!("{name}.{l}.b"), Tensor::zeros(&[w[1]]))?;
        }
        Ok(())
    }

    fn mlp(&self, tape: &mut Tape<'_, f32>, name: &str, mut x: Var, layers: usize) -> Result<Var> {
        for l in 0..layers {
            let w = tape.param(self.id(&format!("{name}.{l}.w")));
            let b = tape.param(self.id(&format!("{name}.{l}.b")));
            x = tape.linear(x, w, b)?;
            if l + 1 < layers {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    fn embed(&self, tape: &mut Tape<'_, f32>, table: &str, ids: Vec<usize>, field: &'static str) -> Result<Var> {
        let t = tape.param(self.id(table));
        tape.embedding(t, ids, field)
    }

    fn dense(tape: &mut Tape<'_, f32>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Var> {
        Ok(tape.leaf(Tensor::new(vec![rows, cols], data)?))
    }
}

fn user_width(space: &FeatureSpace, e: usize, lum: bool) -> usize {
    let base = 3 * e + USER_STATS_DIM;
    match (lum, space.lum) {
        (true, Some((n, d))) => base + n * d + 1,
        _ => base,
    }
}

fn item_width(space: &FeatureSpace, e: usize, lum: bool) -> usize {
    let base = 3 * e + space.content_dim;
    match (lum, space.lum) {
        (true, Some((_, d))) => base + d,
        _ => base,
    }
}

fn add_user_tables(net: &mut Net, space: &FeatureSpace, e: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    net.add_table("user.id", space.num_users, e, rng)?;
    net.add_table("user.scenario", space.num_scenarios, e, rng)?;
    net.add_table("user.query_terms", space.num_query_terms, e, rng)
}

fn add_item_tables(net: &mut Net, space: &FeatureSpace, e: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    net.add_table("item.id", space.num_items, e, rng)?;
    net.add_table("item.category", space.num_categories, e, rng)?;
    net.add_table("item.popularity", POPULARITY_BUCKETS, e, rng)
}

fn user_features(net: &Net, tape: &mut Tape<'_, f32>, users: &[&UserContext], lum: Option<(usize, usize)>) -> Result<Var> {
    let n = users.len();
    let id = net.embed(tape, "user.id", users.iter().map(|u| u.user_id as usize).collect(), "user_id")?;
    let sc = net.embed(tape, "user.scenario", users.iter().map(|u| u.scenario_id as usize).collect(), "scenario_id")?;
    let bag = tape.param(net.id("user.query_terms"));
    let qt = tape.embedding_bag(
        bag,
        users.iter().map(|u| u.query_terms.iter().map(|&t| t as usize).collect()).collect(),
        "query_terms",
    )?;
    let stats = Net::dense(tape, n, USER_STATS_DIM, users.iter().flat_map(|u| u.stats.iter().copied()).collect())?;
    let mut parts = vec![id, sc, qt, stats];
    if let Some((k, d)) = lum {
        let mut data = Vec::with_capacity(n * (k * d + 1));
        for u in users {
            let int = u.interests.as_ref().ok_or_else(|| {
                LumError::InvalidInput(format!("user {} has no LUM interest features", u.user_id))
            })?;
            if int.vectors.len() != k || int.vectors.iter().any(|v| v.len() != d) {
                return Err(LumError::Shape(format!(
                    "user {} carries interests that are not {k} x {d}",
                    u.user_id
                )));
            }
            data.extend(int.vectors.iter().flatten().copied());
            data.push(if int.present { 1.0 } else { 0.0 });
        }
        parts.push(Net::dense(tape, n, k * d + 1, data)?);
    }
    tape.concat_cols(parts)
}

fn item_features(net: &Net, tape: &mut Tape<'_, f32>, items: &[&ItemFeatures], space: &FeatureSpace, lum: Option<usize>) -> Result<Var> {
    let n = items.len();
    let id = net.embed(tape, "item.id", items.iter().map(|i| i.item_id as usize).collect(), "item_id")?;
    let cat = net.embed(tape, "item.category", items.iter().map(|i| i.category_id as usize).collect(), "category_id")?;
    let pop = net.embed(tape, "item.popularity", items.iter().map(|i| i.popularity_bucket as usize).collect(), "popularity_bucket")?;
    let mut parts = vec![id, cat, pop];
    if space.content_dim > 0 {
        if let Some(i) = items.iter().find(|i| i.content.len() != space.content_dim) {
            return Err(LumError::Shape(format!("item {} content width {}", i.item_id, i.content.len())));
        }
        parts.push(Net::dense(tape, n, space.content_dim, items.iter().flat_map(|i| i.content.iter().copied()).collect())?);
    }
    if let Some(d) = lum {
        let mut data = Vec::with_capacity(n * d);
        for i in items {
            match &i.lum_embedding {
                Some(e) if e.len() == d => data.extend_from_slice(e),
                _ => {
                    return Err(LumError::Shape(format!(
                        "item {} lacks a LUM embedding of width {d}",
                        i.item_id
                    )))
                }
            }
        }
        parts.push(Net::dense(tape, n, d, data)?);
    }
    tape.concat_cols(parts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: DlrmConfig,
    space: FeatureSpace,
    usage: Option<LumUsage>,
    use_lum: Option<bool>,
}

/// Embedding+MLP CTR model with a single logit.
#[derive(Debug, Clone)]
pub struct Ranker {
    pub config: DlrmConfig,
    pub space: FeatureSpace,
    pub usage: LumUsage,
    net: Net,
}

impl Ranker {
    pub fn new(config: DlrmConfig, space: FeatureSpace, usage: LumUsage) -> Result<Self> {
        config.validate()?;
        if usage != LumUsage::None && space.lum.is_none() {
            return Err(LumError::InvalidConfig(
                "LUM ranker variants need LUM features in the feature space".into(),
            ));
        }
        let e = config.embedding_dim;
        let lum = usage != LumUsage::None;
        let mut width = user_width(&space, e, lum) + item_width(&space, e, lum);
        if usage == LumUsage::DirectAndMatching {
            width += space.lum.expect("checked").0 + 1;
        }
        let mut dims = vec![width];
        dims.extend(&config.hidden_dims);
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = Net {
            params: ParameterStore::new(),
        };
        add_user_tables(&mut net, &space, e, &mut rng)?;
        add_item_tables(&mut net, &space, e, &mut rng)?;
        net.add_mlp("mlp", &dims, &mut rng)?;
        Ok(Self {
            config,
            space,
            usage,
            net,
        })
    }

    fn logits(&self, tape: &mut Tape<'_, f32>, records: &[&FeatureRecord]) -> Result<Var> {
        let lum = if self.usage == LumUsage::None { None } else { self.space.lum };
        let users: Vec<&UserContext> = records.iter().map(|r| &r.user).collect();
        let items: Vec<&ItemFeatures> = records.iter().map(|r| &r.item).collect();
        let u = user_features(&self.net, tape, &users, lum)?;
        let i = item_features(&self.net, tape, &items, &self.space, lum.map(|l| l.1))?;
        let mut parts = vec![u, i];
        if self.usage == LumUsage::DirectAndMatching {
            let n = self.space.lum.expect("checked").0 + 1;
            let mut data = Vec::with_capacity(records.len() * n);
            for r in records {
                match &r.match_scores {
                    Some(s) if s.len() == n => data.extend_from_slice(s),
                    _ => {
                        return Err(LumError::Shape(format!(
                            "record for user {} lacks {n} interest-matching scores",
                            r.user.user_id
                        )))
                    }
                }
            }
            parts.push(Net::dense(tape, records.len(), n, data)?);
        }
        let x = tape.concat_cols(parts)?;
        self.net.mlp(tape, "mlp", x, self.config.hidden_dims.len() + 1)
    }

    /// Click probabilities in `(0, 1)`.
    pub fn predict(&self, records: &[FeatureRecord]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(1024) {
            let mut tape = Tape::new(&self.net.params);
            let refs: Vec<&FeatureRecord> = chunk.iter().collect();
            let z = self.logits(&mut tape, &refs)?;
            out.extend(tape.value(z).data().iter().map(|&z| {
                crate::nn::sigmoid(z).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON)
            }));
        }
        Ok(out)
    }

    pub fn predict_one(&self, record: &FeatureRecord) -> Result<f32> {
        Ok(self.predict(std::slice::from_ref(record))?[0])
    }

    pub fn params(&self) -> &ParameterStore<f32> {
        &self.net.params
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = ModelMeta {
            kind: "ranker".into(),
            config: self.config.clone(),
            space: self.space,
            usage: Some(self.usage),
            use_lum: None,
        };
        let bytes = checkpoint::save(path, &serde_json::to_string(&meta)?, &self.net.params)?;
        Ok(checkpoint::version_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_meta(path, "ranker")?;
        let mut r = Self::new(meta.config, meta.space, meta.usage.unwrap_or(LumUsage::None))?;
        check_layout(&r.net.params, &params)?;
        r.net.params = params;
        Ok(r)
    }
}

fn load_meta(path: &Path, kind: &str) -> Result<(ModelMeta, ParameterStore<f32>)> {
    if !path.exists() {
        return Err(LumError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "downstream model not found; run `train-dlrm` first".into(),
        });
    }
    let (meta, params) = checkpoint::load::<f32>(path)?;
    let meta: ModelMeta = serde_json::from_str(&meta)?;
    if meta.kind != kind {
        return Err(LumError::Checkpoint(format!(
            "expected a `{kind}` checkpoint, found `{}`",
            meta.kind
        )));
    }
    Ok((meta, params))
}

fn check_layout(expected: &ParameterStore<f32>, got: &ParameterStore<f32>) -> Result<()> {
    let same = expected.len() == got.len()
        && expected
            .iter()
            .all(|(_, n, t)| got.by_name(n).is_some_and(|g| g.shape() == t.shape()));
    if same {
        Ok(())
    } else {
        Err(LumError::Checkpoint("parameter layout does not match the metadata".into()))
    }
}

fn check_labels(records: &[FeatureRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(LumError::InvalidInput("no training records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.label != 0.0 && r.label != 1.0) {
        return Err(LumError::InvalidInput(format!(
            "label {} is not 0 or 1",
            r.label
        )));
    }
    let positives = records.iter().filter(|r| r.label == 1.0).count();
    if positives == 0 || positives == records.len() {
        return Err(LumError::InvalidInput(format!(
            "all {} labels are {}; a ranker needs both clicks and non-clicks",
            records.len(),
            records[0].label
        )));
    }
    Ok(())
}

/// Binary cross-entropy training with Adam.
pub fn rank_train(
    records: &[FeatureRecord],
    space: FeatureSpace,
    usage: LumUsage,
    config: &DlrmConfig,
) -> Result<Ranker> {
    check_labels(records)?;
    let mut ranker = Ranker::new(config.clone(), space, usage)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa11ce);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FeatureRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let grads = {
                let mut tape = Tape::new(&ranker.net.params);
                let z = ranker.logits(&mut tape, &batch)?;
                let loss = tape.bce_with_logits(z, batch.iter().map(|r| r.label).collect())?;
                let loss = tape.scale(loss, 1.0 / batch.len() as f32);
                tape.backward(loss)?.param_grads(&tape)
            };
            ranker.net.params.adam_step(&grads, &adam)?;
        }
    }
    Ok(ranker)
}

pub fn rank_predict(ranker: &Ranker, record: &FeatureRecord) -> Result<f32> {
    ranker.predict_one(record)
}

/// User-query tower and item tower scored by dot product.
#[derive(Debug, Clone)]
pub struct RetrievalTowers {
    pub config: DlrmConfig,
    pub space: FeatureSpace,
    pub use_lum: bool,
    net: Net,
}

impl RetrievalTowers {
    pub fn new(config: DlrmConfig, space: FeatureSpace, use_lum: bool) -> Result<Self> {
        config.validate()?;
        if use_lum && space.lum.is_none() {
            return Err(LumError::InvalidConfig(
                "the LUM retrieval variant needs LUM features in the feature space".into(),
            ));
        }
        let e = config.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = Net {
            params: ParameterStore::new(),
        };
        add_user_tables(&mut net, &space, e, &mut rng)?;
        add_item_tables(&mut net, &space, e, &mut rng)?;
        let mut udims = vec![user_width(&space, e, use_lum)];
        udims.extend(&config.hidden_dims);
        udims.push(config.tower_dim);
        let mut idims = vec![item_width(&space, e, use_lum)];
        idims.extend(&config.hidden_dims);
        idims.push(config.tower_dim);
        net.add_mlp("uenc", &udims, &mut rng)?;
        net.add_mlp("ienc", &idims, &mut rng)?;
        Ok(Self {
            config,
            space,
            use_lum,
            net,
        })
    }

    fn lum(&self) -> Option<(usize, usize)> {
        if self.use_lum {
            self.space.lum
        } else {
            None
        }
    }

    fn user_tower(&self, tape: &mut Tape<'_, f32>, users: &[&UserContext]) -> Result<Var> {
        let x = user_features(&self.net, tape, users, self.lum())?;
        self.net.mlp(tape, "uenc", x, self.config.hidden_dims.len() + 1)
    }

    fn item_tower(&self, tape: &mut Tape<'_, f32>, items: &[&ItemFeatures]) -> Result<Var> {
        let x = item_features(&self.net, tape, items, &self.space, self.lum().map(|l| l.1))?;
        self.net.mlp(tape, "ienc", x, self.config.hidden_dims.len() + 1)
    }

    /// `e^r_us` for each context.
    pub fn encode_users(&self, users: &[UserContext]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(&self.net.params);
        let refs: Vec<&UserContext> = users.iter().collect();
        let v = self.user_tower(&mut tape, &refs)?;
        Ok(tape.value(v).clone())
    }

    /// `e^r_i` for each item.
    pub fn encode_items(&self, items: &[ItemFeatures]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(&self.net.params);
        let refs: Vec<&ItemFeatures> = items.iter().collect();
        let v = self.item_tower(&mut tape, &refs)?;
        Ok(tape.value(v).clone())
    }

    pub fn params(&self) -> &ParameterStore<f32> {
        &self.net.params
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = ModelMeta {
            kind: "retrieval".into(),
            config: self.config.clone(),
            space: self.space,
            usage: None,
            use_lum: Some(self.use_lum),
        };
        let bytes = checkpoint::save(path, &serde_json::to_string(&meta)?, &self.net.params)?;
        Ok(checkpoint::version_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_meta(path, "retrieval")?;
        let mut t = Self::new(meta.config, meta.space, meta.use_lum.unwrap_or(false))?;
        check_layout(&t.net.params, &params)?;
        t.net.params = params;
        Ok(t)
    }
}

/// In-batch softmax over tower dot products; other positives of the batch
/// are the negatives, same-item collisions excluded.
pub fn retrieval_train(
    pairs: &[(UserContext, ItemFeatures)],
    space: FeatureSpace,
    use_lum: bool,
    config: &DlrmConfig,
) -> Result<RetrievalTowers> {
    if pairs.is_empty() {
        return Err(LumError::InvalidInput("no retrieval training pairs".into()));
    }
    let mut towers = RetrievalTowers::new(config.clone(), space, use_lum)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70e5);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let inv_tau = (1.0 / config.temperature) as f32;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let users: Vec<&UserContext> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let mut ids: Vec<ItemId> = chunk.iter().map(|&i| pairs[i].1.item_id).collect();
            let targets_ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            let items: Vec<&ItemFeatures> = ids
                .iter()
                .map(|id| {
                    let j = chunk
                        .iter()
                        .find(|&&i| pairs[i].1.item_id == *id)
                        .expect("id from chunk");
                    &pairs[*j].1
                })
                .collect();
            let targets: Vec<usize> = targets_ids
                .iter()
                .map(|id| ids.binary_search(id).expect("present"))
                .collect();
            let grads = {
                let mut tape = Tape::new(&towers.net.params);
                let u = towers.user_tower(&mut tape, &users)?;
                let it = towers.item_tower(&mut tape, &items)?;
                let logits = tape.matmul_nt(u, it)?;
                let logits = tape.scale(logits, inv_tau);
                let valid = vec![true; users.len() * items.len()];
                let loss = tape.softmax_cross_entropy(logits, valid, targets)?;
                let loss = tape.scale(loss, 1.0 / users.len() as f32);
                tape.backward(loss)?.param_grads(&tape)
            };
            towers.net.params.adam_step(&grads, &adam)?;
        }
    }
    Ok(towers)
}

pub fn retrieval_score(towers: &RetrievalTowers, user: &UserContext, item: &ItemFeatures) -> Result<f32> {
    let u = towers.encode_users(std::slice::from_ref(user))?;
    let i = towers.encode_items(std::slice::from_ref(item))?;
    Ok(u.data().iter().zip(i.data()).map(|(a, b)| a * b).sum())
}

/// Top `k` of `catalog` by dot product, ties by ascending item id.
pub fn retrieve_top_k(
    towers: &RetrievalTowers,
    users: &[UserContext],
    catalog: &[ItemFeatures],
    k: usize,
) -> Result<Vec<Vec<(ItemId, f32)>>> {
    let items = towers.encode_items(catalog)?;
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(512) {
        let u = towers.encode_users(chunk)?;
        let scores = u.matmul_nt(&items)?;
        for r in 0..scores.rows() {
            let mut ranked: Vec<(ItemId, f32)> = scores
                .row(r)
                .iter()
                .zip(catalog)
                .map(|(&s, it)| (it.item_id, s))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            out.push(ranked);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interest_matching_extremes() {
        let v = [0.3, -1.2, 2.0];
        assert!((interest_matching(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert!(interest_matching(&[1.0, 0.0], &[0.0, 2.0]).unwrap().abs() < 1e-7);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((interest_matching(&v, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert!(interest_matching(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
