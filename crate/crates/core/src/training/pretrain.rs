use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gan::{choose_set, derangement, SetBatch};
use super::log::{LogRecord, TrainLog};
use super::TrainConfig;
use crate::autodiff::Tape;
use crate::data::{Caption, DatasetSplit, ImageFeatures, Vocabulary};
use crate::discriminator::{Discriminator, SentenceInput};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::pretrain_discriminator_loss;
use crate::params::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenPretrainSummary {
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
}

/// Mean per-caption NLL over `pairs`, without gradients.
fn eval_ml(gen: &Generator, pairs: &[(&ImageFeatures, &Caption)], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let vars = gen.bind(&mut tape, false)?;
        let l = gen.ml_loss(&mut tape, &vars, chunk)?;
        sum += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

fn pairs<'a>(split: &'a DatasetSplit, refs: &'a [Vec<Caption>]) -> Vec<(&'a ImageFeatures, &'a Caption)> {
    split
        .items
        .iter()
        .zip(refs)
        .flat_map(|(it, rs)| rs.iter().filter(|c| !c.is_empty()).map(move |c| (&it.features, c)))
        .collect()
}

/// Teacher-forced maximum-likelihood training for a fixed number of epochs,
/// keeping the parameters with the lowest held-out loss.
pub fn pretrain_generator(
    gen: &mut Generator,
    train: &DatasetSplit,
    val: &DatasetSplit,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<GenPretrainSummary> {
    cfg.validate()?;
    let train_refs: Vec<Vec<Caption>> = train.items.iter().map(|it| it.encoded_references(vocab)).collect();
    let val_refs: Vec<Vec<Caption>> = val.items.iter().map(|it| it.encoded_references(vocab)).collect();
    let mut train_pairs = pairs(train, &train_refs);
    let val_pairs = pairs(val, &val_refs);
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Precondition("generator pretraining needs non-empty train and val captions".into()));
    }

    let initial = eval_ml(gen, &val_pairs, cfg.batch_size * 4)?;
    let mut best = (initial, 0, gen.params().clone());
    let mut opt = Adam::new(cfg.adam(cfg.pretrain_learning_rate), gen.params());
    let mut final_train = None;
    for epoch in 1..=cfg.pretrain_epochs {
        train_pairs.shuffle(rng);
        let mut sum = 0.0;
        for chunk in train_pairs.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = gen.bind(&mut tape, true)?;
            let loss = gen.ml_loss(&mut tape, &vars, chunk)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("ML loss became {v} in epoch {epoch}")));
            }
            sum += v * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            opt.update(gen.params_mut(), &vars.bound, &grads)?;
        }
        let train_loss = sum / train_pairs.len() as f64;
        let val_loss = eval_ml(gen, &val_pairs, cfg.batch_size * 4)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("held-out ML loss became {val_loss} in epoch {epoch}")));
        }
        let improved = val_loss < best.0;
        if improved {
            best = (val_loss, epoch, gen.params().clone());
        }
        final_train = Some(train_loss);
        log.push(LogRecord::PretrainGenerator {
            epoch,
            train_loss,
            val_loss,
            best: improved,
        })?;
    }
    let (best_val_loss, best_epoch, params) = best;
    *gen.params_mut() = params;
    Ok(GenPretrainSummary {
        initial_val_loss: initial,
        best_val_loss,
        best_epoch,
        final_train_loss: final_train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscPretrainSummary {
    pub initial_val_accuracy: f64,
    pub val_accuracy: f64,
    /// Set when held-out accuracy ends at or below chance.
    pub warning: Option<String>,
}

/// Matched-vs-mismatched accuracy on `split`, pairing image `i` with the
/// references of image `i + 1`.
fn matched_accuracy(disc: &Discriminator, split: &DatasetSplit, refs: &[Vec<Caption>]) -> Result<f64> {
    let p = disc.config().set_size;
    let n = split.len();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(64) {
        let x: Vec<&[f64]> = chunk.iter().map(|&i| split.items[i].features.x_c.as_slice()).collect();
        let matched: Vec<&Caption> = chunk.iter().flat_map(|&i| refs[i][..p].iter()).collect();
        let other: Vec<&Caption> = chunk.iter().flat_map(|&i| refs[(i + 1) % n][..p].iter()).collect();
        let a = disc.score(&matched, &x)?;
        let b = disc.score(&other, &x)?;
        correct += a.iter().filter(|&&v| v > 0.5).count() + b.iter().filter(|&&v| v < 0.5).count();
    }
    Ok(correct as f64 / (2 * n) as f64)
}

/// Trains the discriminator to accept reference sets with their own image and
/// reject them when paired with another image.
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    train: &DatasetSplit,
    val: &DatasetSplit,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<DiscPretrainSummary> {
    cfg.validate()?;
    let p = disc.config().set_size;
    let train_refs: Vec<Vec<Caption>> = train.items.iter().map(|it| it.encoded_references(vocab)).collect();
    let val_refs: Vec<Vec<Caption>> = val.items.iter().map(|it| it.encoded_references(vocab)).collect();
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::Precondition("discriminator pretraining needs ≥ 2 images per split".into()));
    }
    if let Some(r) = train_refs.iter().chain(&val_refs).find(|r| r.len() < p) {
        return Err(Error::Precondition(format!("set size {p} exceeds an image's {} references", r.len())));
    }
    let initial = matched_accuracy(disc, val, &val_refs)?;
    let mut opt = Adam::new(cfg.adam(cfg.disc_pretrain_learning_rate), disc.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut accuracy = initial;
    for epoch in 1..=cfg.disc_pretrain_epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let perm = derangement(chunk.len(), rng);
            let mut sets = SetBatch::default();
            for &i in chunk {
                sets.push_x(&train.items[i].features.x_c);
            }
            for &i in chunk {
                sets.extend(choose_set(&train_refs[i], p, rng));
            }
            for &j in &perm {
                sets.extend(choose_set(&train_refs[chunk[j]], p, rng));
            }
            let g = chunk.len();
            let x: Vec<&[f64]> = sets.x.iter().chain(&sets.x).copied().collect();
            let mut tape = Tape::new();
            let vars = disc.bind(&mut tape, true)?;
            let caps: Vec<&Caption> = sets.captions.to_vec();
            let out = disc.discriminate(&mut tape, &vars, &SentenceInput::Ids(&caps), &x)?;
            let matched = tape.gather_rows(out.prob_real, &(0..g).collect::<Vec<_>>())?;
            let other = tape.gather_rows(out.prob_real, &(g..2 * g).collect::<Vec<_>>())?;
            let loss = pretrain_discriminator_loss(&mut tape, matched, other)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("discriminator pretraining loss became {v}")));
            }
            sum += v;
            batches += 1;
            let grads = tape.backward(loss)?;
            opt.update(disc.params_mut(), &vars.bound, &grads)?;
        }
        accuracy = matched_accuracy(disc, val, &val_refs)?;
        log.push(LogRecord::PretrainDiscriminator {
            epoch,
            train_loss: sum / batches.max(1) as f64,
            val_accuracy: accuracy,
        })?;
    }
    let warning = (cfg.disc_pretrain_epochs > 0 && accuracy <= 0.5)
        .then(|| format!("discriminator pretraining ended at chance accuracy {accuracy:.3}"));
    Ok(DiscPretrainSummary {
        initial_val_accuracy: initial,
        val_accuracy: accuracy,
        warning,
    })
}
