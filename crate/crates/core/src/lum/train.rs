use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss, in_batch_hits, Candidates};
use super::{LumConfig, LumModel};
use crate::datagen::{Corpus, ItemAttributes, ItemId};
use crate::nn::{AdamConfig, Real, Tape, Var};
use crate::tokenize::{
    build_training_mask, pack, pack_one_per_row, tokenize_sequence, truncate, PackedBatch,
    TokenizedSequence,
};
use crate::{LumError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean loss per loss position.
    pub loss: f64,
    pub seconds: f64,
    /// Non-padding tokens processed.
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
}

impl TrainReport {
    pub fn total_seconds(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }

    pub fn tokens_per_sec(&self) -> f64 {
        let tokens: usize = self.steps.iter().map(|s| s.tokens).sum();
        tokens as f64 / self.total_seconds().max(f64::MIN_POSITIVE)
    }

    /// One JSON record per step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Tokenizes and truncates every user history of the corpus, in user order.
pub fn build_sequences(corpus: &Corpus, max_tokens: usize) -> Result<Vec<TokenizedSequence>> {
    corpus
        .users
        .values()
        .map(|events| truncate(&tokenize_sequence(events, &corpus.items)?, max_tokens))
        .collect()
}

fn layout_rows(config: &LumConfig, sequences: &[TokenizedSequence]) -> Result<Vec<PackedBatch>> {
    if config.pack_sequences {
        pack(sequences, config.max_sequence_tokens)
    } else {
        pack_one_per_row(sequences, config.max_sequence_tokens)
    }
}

/// Summed contrastive loss over the loss positions of `rows`, and the number
/// of positions it covers.
pub fn packed_batch_loss<T: Real>(
    model: &LumModel<T>,
    tape: &mut Tape<'_, T>,
    rows: &[PackedBatch],
    items: &[ItemAttributes],
    candidates: &Candidates,
) -> Result<(Var, usize)> {
    let (outputs, targets) = loss_outputs(model, tape, rows)?;
    if targets.is_empty() {
        return Err(LumError::InvalidInput("batch has no loss positions".into()));
    }
    let loss = contrastive_loss(model, tape, outputs, &targets, items, candidates)?;
    Ok((loss, targets.len()))
}

fn loss_outputs<T: Real>(
    model: &LumModel<T>,
    tape: &mut Tape<'_, T>,
    rows: &[PackedBatch],
) -> Result<(Var, Vec<ItemId>)> {
    let masked: Vec<_> = rows
        .iter()
        .map(|r| (r, Arc::new(build_training_mask(r))))
        .collect();
    let o = model.forward_tape(tape, &masked)?;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for r in rows {
        for p in 0..r.len() {
            if r.loss_positions[p] {
                positions.push(offset + p);
                targets.push(r.target_items[p].expect("loss position has a target"));
            }
        }
        offset += r.len();
    }
    Ok((tape.gather_rows(o, positions)?, targets))
}

pub fn train(corpus: &Corpus, config: &LumConfig) -> Result<(LumModel<f32>, TrainReport)> {
    let mut model = LumModel::new(config.clone(), corpus.vocab)?;
    let report = train_with_model(&mut model, corpus)?;
    Ok((model, report))
}

/// Trains `model` in place for `model.config.epochs` epochs.
pub fn train_with_model<T: Real>(model: &mut LumModel<T>, corpus: &Corpus) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(LumError::InvalidInput("cannot train on an empty corpus".into()));
    }
    let config = model.config.clone();
    config.validate()?;
    let sequences = build_sequences(corpus, config.max_sequence_tokens)?;
    let rows = layout_rows(&config, &sequences)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1d);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PackedBatch> = chunk.iter().map(|&i| rows[i].clone()).collect();
            if batch.iter().all(|r| r.num_loss_positions() == 0) {
                continue;
            }
            let start = Instant::now();
            let candidates = Candidates::InBatch {
                max_negatives: config.negatives_per_positive,
                seed: config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64),
            };
            let (grads, total, n) = {
                let mut tape = Tape::new(&model.params);
                let (loss, n) = packed_batch_loss(model, &mut tape, &batch, &corpus.items, &candidates)?;
                let mean = tape.scale(loss, T::lit(1.0 / n as f64));
                let total = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                let grads = tape.backward(mean)?.param_grads(&tape);
                (grads, total, n)
            };
            if !total.is_finite() {
                return Err(LumError::NonFiniteLoss { step, value: total });
            }
            model.params.adam_step(&grads, &adam)?;
            let seconds = start.elapsed().as_secs_f64();
            let tokens = batch.iter().map(PackedBatch::num_real_tokens).sum();
            report.steps.push(StepRecord {
                epoch,
                step,
                loss: total / n as f64,
                seconds,
                tokens,
                tokens_per_sec: tokens as f64 / seconds.max(f64::MIN_POSITIVE),
            });
            loss_sum += total;
            positions += n;
            step += 1;
        }
        report.epoch_mean_loss.push(loss_sum / positions.max(1) as f64);
    }
    Ok(report)
}

/// In-batch retrieval accuracy at loss positions: the share of positions
/// whose target scores highest among the distinct targets of its batch.
pub fn loss_position_accuracy<T: Real>(model: &LumModel<T>, corpus: &Corpus) -> Result<f64> {
    let config = &model.config;
    let sequences = build_sequences(corpus, config.max_sequence_tokens)?;
    let rows = layout_rows(config, &sequences)?;
    let (mut hits, mut total) = (0, 0);
    for batch in rows.chunks(config.batch_size) {
        let mut tape = Tape::new(&model.params);
        let (o, targets) = loss_outputs(model, &mut tape, batch)?;
        if targets.is_empty() {
            continue;
        }
        let mut columns = targets.clone();
        columns.sort_unstable();
        columns.dedup();
        let emb = model.encode_item_ids_tape(&mut tape, &columns, &corpus.items)?;
        hits += in_batch_hits(tape.value(o), &targets, tape.value(emb), &columns)?;
        total += targets.len();
    }
    if total == 0 {
        return Err(LumError::InvalidInput("corpus has no loss positions".into()));
    }
    Ok(hits as f64 / total as f64)
}
