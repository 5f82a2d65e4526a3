use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LumModel;
use crate::datagen::{ItemAttributes, ItemId};
use crate::nn::ops::cosine;
use crate::nn::{Real, Tape, Tensor, Var};
use crate::{LumError, Result};

/// InfoNCE summed over terms, with `sim(a, b) = cosine(a, b) / temperature`.
///
/// `negatives[l]` holds the negative item vectors for term `l`.
pub fn nce_loss<T: Real>(
    condition_outputs: &[Vec<T>],
    positive_items: &[Vec<T>],
    negative_items: &[Vec<Vec<T>>],
    temperature: f64,
) -> Result<T> {
    if condition_outputs.len() != positive_items.len()
        || condition_outputs.len() != negative_items.len()
    {
        return Err(LumError::Shape(format!(
            "{} outputs, {} positives, {} negative sets",
            condition_outputs.len(),
            positive_items.len(),
            negative_items.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(LumError::InvalidInput("temperature must be > 0".into()));
    }
    let tau = T::lit(temperature);
    let mut total = T::zero();
    for ((o, pos), negs) in condition_outputs.iter().zip(positive_items).zip(negative_items) {
        let s_pos = cosine(o, pos)? / tau;
        let mut sims = vec![s_pos];
        for n in negs {
            sims.push(cosine(o, n)? / tau);
        }
        let max = sims.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = sims.iter().map(|&s| (s - max).exp()).sum::<T>().ln() + max;
        total += lse - s_pos;
    }
    Ok(total)
}

/// Which items each loss position is contrasted against.
#[derive(Debug, Clone)]
pub enum Candidates {
    /// The other positives of the batch, at most `max_negatives` of them per
    /// term, subsampled with `seed` when there are more.
    InBatch { max_negatives: usize, seed: u64 },
    /// An explicit negative list per loss position, in order.
    Fixed(Vec<Vec<ItemId>>),
}

/// Tape version of [`nce_loss`] over rows of `outputs`.
///
/// Target embeddings come from the model's own item encoder, so gradients
/// reach both the user encoder and the item token encoder. Negatives equal to
/// the positive are dropped.
pub fn contrastive_loss<T: Real>(
    model: &LumModel<T>,
    tape: &mut Tape<'_, T>,
    outputs: Var,
    targets: &[ItemId],
    items: &[ItemAttributes],
    candidates: &Candidates,
) -> Result<Var> {
    let rows = tape.value(outputs).rows();
    if rows != targets.len() {
        return Err(LumError::Shape(format!(
            "{rows} outputs for {} targets",
            targets.len()
        )));
    }
    let mut universe: BTreeSet<ItemId> = targets.iter().copied().collect();
    if let Candidates::Fixed(negs) = candidates {
        if negs.len() != rows {
            return Err(LumError::Shape(format!(
                "{} fixed negative sets for {rows} outputs",
                negs.len()
            )));
        }
        universe.extend(negs.iter().flatten().copied());
    }
    let columns: Vec<ItemId> = universe.into_iter().collect();
    let col_of = |id: ItemId| columns.binary_search(&id).expect("item in universe");
    let cols = columns.len();

    let mut valid = vec![false; rows * cols];
    let mut target_cols = Vec::with_capacity(rows);
    let mut rng = match candidates {
        Candidates::InBatch { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        Candidates::Fixed(_) => None,
    };
    for (r, &t) in targets.iter().enumerate() {
        let tc = col_of(t);
        target_cols.push(tc);
        let flags = &mut valid[r * cols..(r + 1) * cols];
        flags[tc] = true;
        match candidates {
            Candidates::InBatch { max_negatives, .. } => {
                let others: Vec<usize> = (0..cols).filter(|&c| c != tc).collect();
                if others.len() <= *max_negatives {
                    for c in others {
                        flags[c] = true;
                    }
                } else {
                    let rng = rng.as_mut().expect("in-batch rng");
                    for i in sample(rng, others.len(), *max_negatives) {
                        flags[others[i]] = true;
                    }
                }
            }
            Candidates::Fixed(negs) => {
                for &n in &negs[r] {
                    if n != t {
                        flags[col_of(n)] = true;
                    }
                }
            }
        }
    }

    let emb = model.encode_item_ids_tape(tape, &columns, items)?;
    let emb = tape.l2_normalize(emb)?;
    let o = tape.l2_normalize(outputs)?;
    let logits = tape.matmul_nt(o, emb)?;
    let logits = tape.scale(logits, T::lit(1.0 / model.config.temperature));
    tape.softmax_cross_entropy(logits, valid, target_cols)
}

/// Fraction of rows whose target beats every other in-batch item by cosine.
pub(crate) fn in_batch_hits<T: Real>(outputs: &Tensor<T>, targets: &[ItemId], emb: &Tensor<T>, columns: &[ItemId]) -> Result<usize> {
    let mut hits = 0;
    for (r, &t) in targets.iter().enumerate() {
        let o = outputs.row(r);
        let mut best = (T::neg_infinity(), ItemId::MAX);
        for (c, &id) in columns.iter().enumerate() {
            let s = cosine(o, emb.row(c))?;
            if s > best.0 || (s == best.0 && id < best.1) {
                best = (s, id);
            }
        }
        if best.1 == t {
            hits += 1;
        }
    }
    Ok(hits)
}
