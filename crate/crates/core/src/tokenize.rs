//! Condition/item tokenization plus packing with its attention masks.
//!
//! A behavior sequence `[e_1, .., e_L]` becomes the alternating token stream
//! `[c_1, i_1, .., c_L, i_L]`: the condition token `c_k` carries the context
//! event `k` happened under and precedes the item token `i_k` it conditions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{is_sorted, BehaviorEvent, ItemAttributes, ItemId, UserId};
use crate::{LumError, Result};

/// Number of buckets popularity scores are quantized into.
pub const POPULARITY_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionFields {
    pub scenario_id: u32,
    pub query_terms: Vec<u32>,
    pub category_id: u32,
}

impl ConditionFields {
    pub fn scenario(scenario_id: u32) -> Self {
        Self {
            scenario_id,
            ..Self::default()
        }
    }

    /// True when no field is populated (every id is the reserved 0).
    pub fn is_blank(&self) -> bool {
        self.scenario_id == 0 && self.category_id == 0 && self.query_terms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFields {
    pub item_id: ItemId,
    pub category_id: u32,
    pub popularity_bucket: u32,
    pub content: Vec<f32>,
}

impl ItemFields {
    pub fn from_attributes(item_id: ItemId, attrs: &ItemAttributes) -> Self {
        Self {
            item_id,
            category_id: attrs.category_id,
            popularity_bucket: popularity_bucket(attrs.popularity),
            content: attrs.content.clone(),
        }
    }
}

pub fn popularity_bucket(popularity: f32) -> u32 {
    let max = (POPULARITY_BUCKETS - 1) as f32;
    (popularity.clamp(0.0, 1.0) * max).round() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Condition,
    Item,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Condition(ConditionFields),
    Item(ItemFields),
}

/// A single feature of a token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue<'a> {
    Id(u32),
    Ids(&'a [u32]),
    Vector(&'a [f32]),
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Condition(_) => TokenKind::Condition,
            Token::Item(_) => TokenKind::Item,
        }
    }

    pub fn as_item(&self) -> Option<&ItemFields> {
        match self {
            Token::Item(i) => Some(i),
            Token::Condition(_) => None,
        }
    }

    pub fn as_condition(&self) -> Option<&ConditionFields> {
        match self {
            Token::Condition(c) => Some(c),
            Token::Item(_) => None,
        }
    }

    /// Features in their fixed per-kind order.
    pub fn feature_fields(&self) -> Vec<(&'static str, FieldValue<'_>)> {
        match self {
            Token::Condition(c) => vec![
                ("scenario_id", FieldValue::Id(c.scenario_id)),
                ("query_terms", FieldValue::Ids(&c.query_terms)),
                ("category_id", FieldValue::Id(c.category_id)),
            ],
            Token::Item(i) => vec![
                ("item_id", FieldValue::Id(i.item_id)),
                ("category_id", FieldValue::Id(i.category_id)),
                ("popularity_bucket", FieldValue::Id(i.popularity_bucket)),
                ("content", FieldValue::Vector(&i.content)),
            ],
        }
    }
}

/// Alternating `[C, I, C, I, ..]` stream of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSequence {
    pub user_id: UserId,
    pub tokens: Vec<Token>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_alternating(&self) -> bool {
        self.tokens.len() % 2 == 0
            && self.tokens.iter().enumerate().all(|(i, t)| {
                t.kind()
                    == if i % 2 == 0 {
                        TokenKind::Condition
                    } else {
                        TokenKind::Item
                    }
            })
    }
}

pub fn condition_of(event: &BehaviorEvent) -> ConditionFields {
    ConditionFields {
        scenario_id: event.scenario_id,
        query_terms: event.query_terms.clone(),
        category_id: event.category_id,
    }
}

/// Splits every event into a condition token followed by an item token.
pub fn tokenize_sequence(
    events: &[BehaviorEvent],
    items: &[ItemAttributes],
) -> Result<TokenizedSequence> {
    if !is_sorted(events) {
        return Err(LumError::InvalidInput(
            "events must be sorted by timestamp before tokenization".into(),
        ));
    }
    let user_id = events.first().map_or(0, |e| e.user_id);
    let mut tokens = Vec::with_capacity(events.len() * 2);
    for e in events {
        let attrs = items
            .get(e.item_id as usize)
            .ok_or(LumError::OutOfVocabulary {
                field: "item_id",
                value: e.item_id as usize,
                vocab: items.len(),
            })?;
        tokens.push(Token::Condition(condition_of(e)));
        tokens.push(Token::Item(ItemFields::from_attributes(e.item_id, attrs)));
    }
    Ok(TokenizedSequence { user_id, tokens })
}

/// Keeps the most recent `max_tokens` tokens, cutting on a condition boundary.
pub fn truncate(seq: &TokenizedSequence, max_tokens: usize) -> Result<TokenizedSequence> {
    if max_tokens % 2 != 0 || max_tokens < 2 {
        return Err(LumError::InvalidInput(format!(
            "max_tokens must be even and >= 2, got {max_tokens}"
        )));
    }
    if seq.len() <= max_tokens {
        return Ok(seq.clone());
    }
    // seq.len() is even, so the cut lands on a condition token.
    let start = seq.len() - max_tokens;
    Ok(TokenizedSequence {
        user_id: seq.user_id,
        tokens: seq.tokens[start..].to_vec(),
    })
}

/// One fixed-length row holding one or more sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    /// `None` marks padding.
    pub tokens: Vec<Option<Token>>,
    /// Segment of each position; `-1` for padding.
    pub segment_ids: Vec<i32>,
    /// Restarts at 0 in every segment.
    pub position_ids: Vec<usize>,
    /// True at condition positions followed by an item of the same segment.
    pub loss_positions: Vec<bool>,
    /// Item to predict at each loss position.
    pub target_items: Vec<Option<ItemId>>,
    /// User of each segment.
    pub segment_users: Vec<UserId>,
}

impl PackedBatch {
    fn with_capacity(max_len: usize) -> Self {
        Self {
            tokens: Vec::with_capacity(max_len),
            segment_ids: Vec::with_capacity(max_len),
            position_ids: Vec::with_capacity(max_len),
            loss_positions: Vec::with_capacity(max_len),
            target_items: Vec::with_capacity(max_len),
            segment_users: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_padding(&self, p: usize) -> bool {
        self.segment_ids[p] < 0
    }

    pub fn num_real_tokens(&self) -> usize {
        self.segment_ids.iter().filter(|&&s| s >= 0).count()
    }

    pub fn num_loss_positions(&self) -> usize {
        self.loss_positions.iter().filter(|&&b| b).count()
    }

    fn push_sequence(&mut self, seq: &TokenizedSequence) {
        let segment = self.segment_users.len() as i32;
        self.segment_users.push(seq.user_id);
        for (pos, tok) in seq.tokens.iter().enumerate() {
            let target = match (tok, seq.tokens.get(pos + 1)) {
                (Token::Condition(_), Some(Token::Item(item))) => Some(item.item_id),
                _ => None,
            };
            self.tokens.push(Some(tok.clone()));
            self.segment_ids.push(segment);
            self.position_ids.push(pos);
            self.loss_positions.push(target.is_some());
            self.target_items.push(target);
        }
    }

    fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.tokens.push(None);
            self.segment_ids.push(-1);
            self.position_ids.push(0);
            self.loss_positions.push(false);
            self.target_items.push(None);
        }
    }
}

fn check_fits(sequences: &[TokenizedSequence], max_len: usize) -> Result<()> {
    for (i, s) in sequences.iter().enumerate() {
        if s.len() > max_len {
            return Err(LumError::InvalidInput(format!(
                "sequence {i} has {} tokens, more than max_len {max_len}; truncate it first",
                s.len()
            )));
        }
    }
    Ok(())
}

/// First-fit-decreasing packing of sequences into rows of `max_len`.
///
/// Sequences are placed longest first (ties keep input order) into the first
/// row with room; rows appear in creation order and are padded to `max_len`.
/// Empty sequences contribute nothing.
pub fn pack(sequences: &[TokenizedSequence], max_len: usize) -> Result<Vec<PackedBatch>> {
    check_fits(sequences, max_len)?;
    let mut order: Vec<usize> = (0..sequences.len())
        .filter(|&i| !sequences[i].is_empty())
        .collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sequences[i].len()));

    let mut rows: Vec<PackedBatch> = Vec::new();
    for i in order {
        let seq = &sequences[i];
        match rows.iter_mut().find(|r| r.len() + seq.len() <= max_len) {
            Some(row) => row.push_sequence(seq),
            None => {
                let mut row = PackedBatch::with_capacity(max_len);
                row.push_sequence(seq);
                rows.push(row);
            }
        }
    }
    for row in &mut rows {
        row.pad_to(max_len);
    }
    Ok(rows)
}

/// One sequence per row, each padded to `max_len`, in input order.
pub fn pack_one_per_row(
    sequences: &[TokenizedSequence],
    max_len: usize,
) -> Result<Vec<PackedBatch>> {
    check_fits(sequences, max_len)?;
    Ok(sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut row = PackedBatch::with_capacity(max_len);
            row.push_sequence(s);
            row.pad_to(max_len);
            row
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Training,
    GroupQuery,
}

/// Square boolean attention mask: row `p` may attend column `q` iff
/// `allowed(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSpec {
    n: usize,
    allowed: Vec<bool>,
    padding: Vec<bool>,
    pub mode: MaskMode,
}

impl AttentionMaskSpec {
    pub fn from_fn(n: usize, padding: Vec<bool>, f: impl Fn(usize, usize) -> bool) -> Self {
        assert_eq!(padding.len(), n);
        let mut allowed = vec![false; n * n];
        for p in 0..n {
            for q in 0..n {
                allowed[p * n + q] = f(p, q);
            }
        }
        Self {
            n,
            allowed,
            padding,
            mode: MaskMode::Training,
        }
    }

    /// Plain lower-triangular mask without padding.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, vec![false; n], |p, q| q <= p)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.n + q]
    }

    pub fn is_padding(&self, p: usize) -> bool {
        self.padding[p]
    }

    pub fn allowed_columns(&self, p: usize) -> Vec<usize> {
        (0..self.n).filter(|&q| self.allowed(p, q)).collect()
    }

    /// Rows of `0`/`1` characters, one line per position.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for p in 0..self.n {
            for q in 0..self.n {
                s.push(if self.allowed(p, q) { '1' } else { '0' });
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Causal attention restricted to each segment; padding attends to nothing.
pub fn build_training_mask(batch: &PackedBatch) -> AttentionMaskSpec {
    let seg = &batch.segment_ids;
    let padding = seg.iter().map(|&s| s < 0).collect();
    AttentionMaskSpec::from_fn(batch.len(), padding, |p, q| {
        q <= p && seg[p] >= 0 && seg[p] == seg[q]
    })
}

/// Appends every query condition after the shared prefix.
///
/// Each query position attends to the whole prefix and to itself only, and
/// takes position id `len(prefix)`.
pub fn build_group_query_batch(
    prefix: &TokenizedSequence,
    conditions: &[ConditionFields],
) -> Result<(PackedBatch, AttentionMaskSpec)> {
    if conditions.is_empty() {
        return Err(LumError::InvalidInput(
            "group query needs at least one condition".into(),
        ));
    }
    if !prefix.is_alternating() {
        return Err(LumError::InvalidInput(
            "prefix must alternate condition and item tokens".into(),
        ));
    }
    let l = prefix.len();
    let mut batch = PackedBatch::with_capacity(l + conditions.len());
    batch.push_sequence(prefix);
    if prefix.is_empty() {
        batch.segment_users.push(prefix.user_id);
    }
    for c in conditions {
        batch.tokens.push(Some(Token::Condition(c.clone())));
        batch.segment_ids.push(0);
        batch.position_ids.push(l);
        batch.loss_positions.push(false);
        batch.target_items.push(None);
    }
    let n = batch.len();
    let mut mask = AttentionMaskSpec::from_fn(n, vec![false; n], |p, q| {
        if p < l {
            q <= p
        } else {
            q < l || q == p
        }
    });
    mask.mode = MaskMode::GroupQuery;
    Ok((batch, mask))
}
