use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LumConfig;
use crate::datagen::{ItemAttributes, ItemId, Vocabulary};
use crate::nn::{checkpoint, AttentionBlock, ParamId, ParameterStore, Real, Tape, Tensor, Var};
use crate::tokenize::{
    AttentionMaskSpec, ConditionFields, ItemFields, PackedBatch, Token, POPULARITY_BUCKETS,
};
use crate::{LumError, Result};

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Affine,
    q: Affine,
    k: Affine,
    v: Affine,
    out: Affine,
    ln2: Affine,
    fc1: Affine,
    fc2: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    scenario: ParamId,
    condition_category: ParamId,
    query_terms: ParamId,
    condition_proj: Affine,
    item_id: ParamId,
    item_category: ParamId,
    popularity: ParamId,
    item_proj: Affine,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: Affine,
}

/// Token encoder plus autoregressive transformer.
#[derive(Debug, Clone)]
pub struct LumModel<T: Real = f32> {
    pub config: LumConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore<T>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: LumConfig,
    vocab: Vocabulary,
}

struct Init<'a, T: Real> {
    store: &'a mut ParameterStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Affine> {
        let w = self.randn(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            gain / (fan_in as f64).sqrt(),
        )?;
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Affine { w, b })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Affine> {
        let w = self
            .store
            .add(format!("{name}.g"), Tensor::filled(&[dim], T::one()))?;
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Affine { w, b })
    }
}

fn lookup(store_names: &impl Fn(&str) -> Result<ParamId>, name: &str) -> Result<Affine> {
    let (w, b) = if name.ends_with("norm") || name.contains(".ln") {
        (format!("{name}.g"), format!("{name}.b"))
    } else {
        (format!("{name}.w"), format!("{name}.b"))
    };
    Ok(Affine {
        w: store_names(&w)?,
        b: store_names(&b)?,
    })
}

impl<T: Real> LumModel<T> {
    pub fn new(config: LumConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let d = config.attention.model_dim;
        let fd = config.field_dims;
        let mut store = ParameterStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let scenario = init.randn("cond.scenario", &[vocab.num_scenarios.max(1), fd.scenario], 1.0)?;
        let condition_category = init.randn(
            "cond.category",
            &[vocab.num_categories.max(1), fd.condition_category],
            1.0,
        )?;
        let query_terms = init.randn(
            "cond.query_terms",
            &[vocab.num_query_terms.max(1), fd.query_terms],
            1.0,
        )?;
        let condition_proj = init.linear(
            "cond.proj",
            fd.scenario + fd.condition_category + fd.query_terms,
            d,
            1.0,
        )?;
        let item_id = init.randn("item.id", &[vocab.num_items.max(1), fd.item_id], 1.0)?;
        let item_category = init.randn(
            "item.category",
            &[vocab.num_categories.max(1), fd.item_category],
            1.0,
        )?;
        let popularity = init.randn("item.popularity", &[POPULARITY_BUCKETS, fd.popularity], 1.0)?;
        let item_proj = init.linear(
            "item.proj",
            fd.item_id + fd.item_category + fd.popularity + vocab.content_dim,
            d,
            1.0,
        )?;
        let positions = init.randn("positions", &[config.max_sequence_tokens + 1, d], 0.1)?;
        let residual_gain = 1.0 / (2.0 * config.attention.num_layers as f64).sqrt();
        let h = config.attention.mlp_hidden_dim;
        let mut blocks = Vec::new();
        for l in 0..config.attention.num_layers {
            let p = format!("blocks.{l}");
            blocks.push(Block {
                ln1: init.norm(&format!("{p}.ln1"), d)?,
                q: init.linear(&format!("{p}.attn.q"), d, d, 1.0)?,
                k: init.linear(&format!("{p}.attn.k"), d, d, 1.0)?,
                v: init.linear(&format!("{p}.attn.v"), d, d, 1.0)?,
                out: init.linear(&format!("{p}.attn.out"), d, d, residual_gain)?,
                ln2: init.norm(&format!("{p}.ln2"), d)?,
                fc1: init.linear(&format!("{p}.mlp.fc1"), d, h, 1.0)?,
                fc2: init.linear(&format!("{p}.mlp.fc2"), h, d, residual_gain)?,
            });
        }
        let final_norm = init.norm("final_norm", d)?;
        let layout = Layout {
            scenario,
            condition_category,
            query_terms,
            condition_proj,
            item_id,
            item_category,
            popularity,
            item_proj,
            positions,
            blocks,
            final_norm,
        };
        Ok(Self {
            config,
            vocab,
            params: store,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, checking every shape.
    pub fn from_params(
        config: LumConfig,
        vocab: Vocabulary,
        params: ParameterStore<T>,
    ) -> Result<Self> {
        let reference = LumModel::<T>::new(config.clone(), vocab)?;
        if reference.params.len() != params.len() {
            return Err(LumError::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, value) in reference.params.iter() {
            match params.by_name(name) {
                Some(t) if t.shape() == value.shape() => {}
                Some(t) => {
                    return Err(LumError::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        value.shape()
                    )))
                }
                None => {
                    return Err(LumError::Checkpoint(format!("missing parameter `{name}`")))
                }
            }
        }
        let find = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| LumError::Checkpoint(format!("missing parameter `{n}`")))
        };
        let blocks = (0..config.attention.num_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                Ok(Block {
                    ln1: lookup(&find, &format!("{p}.ln1"))?,
                    q: lookup(&find, &format!("{p}.attn.q"))?,
                    k: lookup(&find, &format!("{p}.attn.k"))?,
                    v: lookup(&find, &format!("{p}.attn.v"))?,
                    out: lookup(&find, &format!("{p}.attn.out"))?,
                    ln2: lookup(&find, &format!("{p}.ln2"))?,
                    fc1: lookup(&find, &format!("{p}.mlp.fc1"))?,
                    fc2: lookup(&find, &format!("{p}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout {
            scenario: find("cond.scenario")?,
            condition_category: find("cond.category")?,
            query_terms: find("cond.query_terms")?,
            condition_proj: lookup(&find, "cond.proj")?,
            item_id: find("item.id")?,
            item_category: find("item.category")?,
            popularity: find("item.popularity")?,
            item_proj: lookup(&find, "item.proj")?,
            positions: find("positions")?,
            blocks,
            final_norm: lookup(&find, "final_norm")?,
        };
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.attention.model_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same model with its parameters in another precision.
    pub fn cast<U: Real>(&self) -> LumModel<U> {
        LumModel::from_params(self.config.clone(), self.vocab, self.params.cast())
            .expect("identical layout")
    }

    fn checkpoint_meta(&self) -> String {
        serde_json::to_string(&CheckpointMeta {
            kind: "lum".into(),
            config: self.config.clone(),
            vocab: self.vocab,
        })
        .expect("serializable")
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.checkpoint_meta(), &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::decode::<T>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| LumError::Checkpoint(format!("metadata: {e}")))?;
        if meta.kind != "lum" {
            return Err(LumError::Checkpoint(format!(
                "checkpoint holds a `{}` model, not a LUM",
                meta.kind
            )));
        }
        Self::from_params(meta.config, meta.vocab, params)
    }

    /// Stable hash of the serialized parameters and configuration.
    pub fn version(&self) -> String {
        checkpoint::version_hash(&self.to_checkpoint_bytes())
    }

    fn blank_if_disabled<'c>(&self, c: &'c ConditionFields) -> std::borrow::Cow<'c, ConditionFields> {
        if self.config.use_conditions {
            std::borrow::Cow::Borrowed(c)
        } else {
            std::borrow::Cow::Owned(ConditionFields::default())
        }
    }

    /// `proj^c(concat(scenario, category, mean(query terms)))` for each condition.
    pub fn encode_conditions_tape(
        &self,
        tape: &mut Tape<'_, T>,
        conditions: &[&ConditionFields],
    ) -> Result<Var> {
        let l = &self.layout;
        let mut scen = Vec::with_capacity(conditions.len());
        let mut cat = Vec::with_capacity(conditions.len());
        let mut bags = Vec::with_capacity(conditions.len());
        for c in conditions {
            let c = self.blank_if_disabled(c);
            scen.push(c.scenario_id as usize);
            cat.push(c.category_id as usize);
            bags.push(c.query_terms.iter().map(|&t| t as usize).collect());
        }
        let t_scen = tape.param(l.scenario);
        let t_cat = tape.param(l.condition_category);
        let t_terms = tape.param(l.query_terms);
        let e_scen = tape.embedding(t_scen, scen, "scenario_id")?;
        let e_cat = tape.embedding(t_cat, cat, "category_id")?;
        let e_terms = tape.embedding_bag(t_terms, bags, "query_terms")?;
        let x = tape.concat_cols(vec![e_scen, e_cat, e_terms])?;
        let w = tape.param(l.condition_proj.w);
        let b = tape.param(l.condition_proj.b);
        tape.linear(x, w, b)
    }

    /// `proj^i(concat(id, category, popularity bucket, content))` for each item.
    pub fn encode_items_tape(&self, tape: &mut Tape<'_, T>, items: &[&ItemFields]) -> Result<Var> {
        let l = &self.layout;
        let content_dim = self.vocab.content_dim;
        let mut content = Vec::with_capacity(items.len() * content_dim);
        for it in items {
            if it.content.len() != content_dim {
                return Err(LumError::Shape(format!(
                    "item {} has {} content values, vocabulary declares {content_dim}",
                    it.item_id,
                    it.content.len()
                )));
            }
            content.extend(it.content.iter().map(|&v| T::lit(v as f64)));
        }
        let t_id = tape.param(l.item_id);
        let t_cat = tape.param(l.item_category);
        let t_pop = tape.param(l.popularity);
        let e_id = tape.embedding(t_id, items.iter().map(|i| i.item_id as usize).collect(), "item_id")?;
        let e_cat = tape.embedding(
            t_cat,
            items.iter().map(|i| i.category_id as usize).collect(),
            "category_id",
        )?;
        let e_pop = tape.embedding(
            t_pop,
            items.iter().map(|i| i.popularity_bucket as usize).collect(),
            "popularity_bucket",
        )?;
        let mut parts = vec![e_id, e_cat, e_pop];
        if content_dim > 0 {
            parts.push(tape.leaf(Tensor::new(vec![items.len(), content_dim], content)?));
        }
        let x = tape.concat_cols(parts)?;
        let w = tape.param(l.item_proj.w);
        let b = tape.param(l.item_proj.b);
        tape.linear(x, w, b)
    }

    /// Item embeddings `e^i` for the given ids, looked up in `table`.
    pub fn encode_item_ids_tape(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[ItemId],
        table: &[ItemAttributes],
    ) -> Result<Var> {
        let fields = item_fields(ids, table)?;
        let refs: Vec<&ItemFields> = fields.iter().collect();
        self.encode_items_tape(tape, &refs)
    }

    /// `e^t` of a single token.
    pub fn encode_token(&self, token: &Token) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.params);
        let v = match token {
            Token::Condition(c) => self.encode_conditions_tape(&mut tape, &[c])?,
            Token::Item(i) => self.encode_items_tape(&mut tape, &[i])?,
        };
        Ok(tape.value(v).data().to_vec())
    }

    /// Embeddings of every catalog item, `[num_items, model_dim]`.
    pub fn item_embeddings(&self, table: &[ItemAttributes]) -> Result<Tensor<T>> {
        let d = self.model_dim();
        let mut out = Vec::with_capacity(table.len() * d);
        let ids: Vec<ItemId> = (0..table.len() as ItemId).collect();
        for chunk in ids.chunks(512) {
            let mut tape = Tape::new(&self.params);
            let v = self.encode_item_ids_tape(&mut tape, chunk, table)?;
            out.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![table.len(), d], out)
    }

    /// Runs the user encoder over several rows at once, laid out back to back.
    /// Returns the `[total_positions, model_dim]` outputs `o`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_, T>,
        rows: &[(&PackedBatch, Arc<AttentionMaskSpec>)],
    ) -> Result<Var> {
        let d = self.model_dim();
        let heads = self.config.attention.num_heads;
        let total: usize = rows.iter().map(|(b, _)| b.len()).sum();
        let mut cond_pos = Vec::new();
        let mut conds = Vec::new();
        let mut item_pos = Vec::new();
        let mut items = Vec::new();
        let mut positions = Vec::with_capacity(total);
        let mut blocks = Vec::with_capacity(rows.len());
        let mut offset = 0;
        for (batch, mask) in rows {
            if mask.len() != batch.len() {
                return Err(LumError::Mask(format!(
                    "mask of {} positions for a batch of {}",
                    mask.len(),
                    batch.len()
                )));
            }
            for (p, tok) in batch.tokens.iter().enumerate() {
                match tok {
                    Some(Token::Condition(c)) => {
                        cond_pos.push(offset + p);
                        conds.push(c);
                    }
                    Some(Token::Item(i)) => {
                        item_pos.push(offset + p);
                        items.push(i);
                    }
                    None => {}
                }
                let pos = batch.position_ids[p];
                if pos > self.config.max_sequence_tokens {
                    return Err(LumError::InvalidInput(format!(
                        "position id {pos} exceeds max_sequence_tokens {}",
                        self.config.max_sequence_tokens
                    )));
                }
                positions.push(pos);
            }
            blocks.push(AttentionBlock {
                offset,
                mask: mask.clone(),
            });
            offset += batch.len();
        }

        let mut parts = Vec::new();
        if !conds.is_empty() {
            parts.push((self.encode_conditions_tape(tape, &conds)?, cond_pos));
        }
        if !items.is_empty() {
            parts.push((self.encode_items_tape(tape, &items)?, item_pos));
        }
        let tokens = tape.scatter_rows(total, d, parts)?;
        let pos_table = tape.param(self.layout.positions);
        let pos = tape.embedding(pos_table, positions, "position")?;
        let mut x = tape.add(tokens, pos)?;

        for block in &self.layout.blocks {
            let h = self.norm(tape, x, block.ln1)?;
            let q = self.affine(tape, h, block.q)?;
            let k = self.affine(tape, h, block.k)?;
            let v = self.affine(tape, h, block.v)?;
            let a = tape.attention(q, k, v, heads, blocks.clone())?;
            let a = self.affine(tape, a, block.out)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, block.ln2)?;
            let f = self.affine(tape, h, block.fc1)?;
            let f = tape.gelu(f);
            let f = self.affine(tape, f, block.fc2)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, x, self.layout.final_norm)
    }

    fn affine(&self, tape: &mut Tape<'_, T>, x: Var, a: Affine) -> Result<Var> {
        let w = tape.param(a.w);
        let b = tape.param(a.b);
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var, a: Affine) -> Result<Var> {
        let g = tape.param(a.w);
        let b = tape.param(a.b);
        tape.layer_norm(x, g, b)
    }

    /// Outputs `o` at every position of one batch, `[len, model_dim]`.
    pub fn forward(&self, batch: &PackedBatch, mask: &AttentionMaskSpec) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let o = self.forward_tape(&mut tape, &[(batch, Arc::new(mask.clone()))])?;
        Ok(tape.value(o).clone())
    }
}

pub(crate) fn item_fields(ids: &[ItemId], table: &[ItemAttributes]) -> Result<Vec<ItemFields>> {
    ids.iter()
        .map(|&id| {
            table
                .get(id as usize)
                .map(|a| ItemFields::from_attributes(id, a))
                .ok_or(LumError::OutOfVocabulary {
                    field: "item_id",
                    value: id as usize,
                    vocab: table.len(),
                })
        })
        .collect()
}

/// Writes the model and returns its version hash.
pub fn save_checkpoint<T: Real>(model: &LumModel<T>, path: &Path) -> Result<String> {
    let bytes = checkpoint::save(path, &model.checkpoint_meta(), &model.params)?;
    Ok(checkpoint::version_hash(&bytes))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LumModel<T>> {
    if !path.exists() {
        return Err(LumError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "LUM checkpoint not found; run `train-lum` first".into(),
        });
    }
    LumModel::from_checkpoint_bytes(&std::fs::read(path)?)
}
