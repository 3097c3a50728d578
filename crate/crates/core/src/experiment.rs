//! End-to-end comparison of the maximum-likelihood baseline, the adversarial
//! model and the single-caption ablation on one dataset.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, SplitTag};
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::generator::Generator;
use crate::metrics::{diversity_report, DiversityReport, MetricRegistry, SetsByImage};
use crate::training::{
    pretrain_discriminator, pretrain_generator, run_schedule, DiscPretrainSummary, GanTrainer, GenPretrainSummary,
    LogRecord, ScheduleSummary, TrainLog,
};

/// Stream offsets so each phase draws from its own seeded generator.
const INIT_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const DISC_STREAM: u64 = 3;
const GAN_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;

fn phase_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Builds a freshly initialized generator for `dataset`.
pub fn new_generator(dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Generator> {
    let gc = cfg.model.generator(dataset.vocab.len(), dataset.feature_dim(), dataset.num_objects())?;
    Generator::new(gc, dataset.vocab.object_ids()?, &mut phase_rng(seed, INIT_STREAM))
}

pub fn new_discriminator(dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Discriminator> {
    let dc = cfg.model.discriminator(dataset.vocab.len(), dataset.feature_dim())?;
    Discriminator::new(dc, &mut phase_rng(seed, INIT_STREAM))
}

/// Maximum-likelihood pretraining from a fresh initialization.
pub fn train_baseline(
    dataset: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(Generator, GenPretrainSummary)> {
    let mut gen = new_generator(dataset, cfg, seed)?;
    let summary = pretrain_generator(
        &mut gen,
        dataset.split(SplitTag::Train),
        dataset.split(SplitTag::Val),
        &dataset.vocab,
        &cfg.train,
        &mut phase_rng(seed, PRETRAIN_STREAM),
        log,
    )?;
    Ok((gen, summary))
}

pub fn train_discriminator(
    dataset: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(Discriminator, DiscPretrainSummary)> {
    let mut disc = new_discriminator(dataset, cfg, seed)?;
    let summary = pretrain_discriminator(
        &mut disc,
        dataset.split(SplitTag::Train),
        dataset.split(SplitTag::Val),
        &dataset.vocab,
        &cfg.train,
        &mut phase_rng(seed, DISC_STREAM),
        log,
    )?;
    Ok((disc, summary))
}

/// Alternating adversarial training starting from pretrained networks.
pub fn train_adversarial(
    dataset: &Dataset,
    cfg: &RunConfig,
    gen: Generator,
    disc: Discriminator,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(Generator, Discriminator, ScheduleSummary)> {
    let mut trainer = GanTrainer::new(
        gen,
        disc,
        dataset.split(SplitTag::Train),
        dataset.split(SplitTag::Val),
        &dataset.vocab,
        &cfg.train,
        seed.wrapping_add(GAN_STREAM << 32),
    )?;
    let summary = run_schedule(&mut trainer, &cfg.train, log)?;
    let (g, d) = trainer.into_models();
    Ok((g, d, summary))
}

/// `p` sampled captions per image of `split`, tokenized, keyed by image id.
pub fn sample_sets(gen: &Generator, dataset: &Dataset, split: SplitTag, p: usize, seed: u64) -> Result<SetsByImage> {
    let mut rng = phase_rng(seed, EVAL_STREAM);
    let mut out = SetsByImage::new();
    for item in &dataset.split(split).items {
        let set = gen.generate_set(&item.features, p, &mut rng)?;
        let words = set
            .into_iter()
            .map(|s| dataset.vocab.decode(&s.caption.tokens))
            .collect();
        out.insert(item.image_id, words);
    }
    Ok(out)
}

/// Diversity of `p` samples per test image against the training references.
pub fn evaluate(gen: &Generator, dataset: &Dataset, p: usize, seed: u64) -> Result<DiversityReport> {
    let sets = sample_sets(gen, dataset, SplitTag::Test, p, seed)?;
    let training = dataset.split(SplitTag::Train).reference_corpus();
    diversity_report(&sets, &training, &MetricRegistry::default())
}

/// The four headline statistics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub div1: f64,
    pub div2: f64,
    pub mbleu4: f64,
    pub vocab_size: usize,
    pub pct_novel: f64,
}

impl ArmResult {
    fn from_report(arm: &str, seed: u64, r: &DiversityReport) -> Self {
        ArmResult {
            arm: arm.into(),
            seed,
            div1: r.div1().unwrap_or(f64::NAN),
            div2: r.div2().unwrap_or(f64::NAN),
            mbleu4: r.mbleu4().unwrap_or(f64::NAN),
            vocab_size: r.vocab_size(),
            pct_novel: r.pct_novel(),
        }
    }
}

fn snapshot(log: &mut TrainLog, update: u64, r: &ArmResult) -> Result<()> {
    let metrics: BTreeMap<String, f64> = [
        ("div1", r.div1),
        ("div2", r.div2),
        ("mbleu4", r.mbleu4),
        ("vocab_size", r.vocab_size as f64),
        ("pct_novel", r.pct_novel),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    log.push(LogRecord::Snapshot { update, metrics })
}

/// Baseline, adversarial and ablation results for one training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base: ArmResult,
    pub adv: ArmResult,
    pub ablation: ArmResult,
    pub adv_schedule: ScheduleSummary,
    pub ablation_schedule: ScheduleSummary,
}

/// The ablation judges single captions and drops feature matching.
pub fn ablation_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.model.set_size = 1;
    c.train.feature_matching = false;
    c
}

/// Trains and evaluates all three arms for one seed. The adversarial arms
/// start from the baseline's weights.
pub fn run_seed(dataset: &Dataset, cfg: &RunConfig, seed: u64, log: &mut TrainLog) -> Result<SeedResult> {
    let p = cfg.eval.p;
    let (base, _) = train_baseline(dataset, cfg, seed, log)?;
    let base_r = ArmResult::from_report("base", seed, &evaluate(&base, dataset, p, seed)?);
    snapshot(log, 0, &base_r)?;

    let (disc, _) = train_discriminator(dataset, cfg, seed, log)?;
    let (adv, _, adv_s) = train_adversarial(dataset, cfg, base.clone(), disc, seed, log)?;
    let adv_r = ArmResult::from_report("adv", seed, &evaluate(&adv, dataset, p, seed)?);
    snapshot(log, adv_s.d_updates + adv_s.g_updates, &adv_r)?;

    let ab_cfg = ablation_config(cfg);
    let (disc1, _) = train_discriminator(dataset, &ab_cfg, seed, log)?;
    let (ab, _, ab_s) = train_adversarial(dataset, &ab_cfg, base, disc1, seed, log)?;
    let ab_r = ArmResult::from_report("ablation", seed, &evaluate(&ab, dataset, p, seed)?);
    snapshot(log, ab_s.d_updates + ab_s.g_updates, &ab_r)?;

    Ok(SeedResult {
        seed,
        base: base_r,
        adv: adv_r,
        ablation: ab_r,
        adv_schedule: adv_s,
        ablation_schedule: ab_s,
    })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-statistic medians over seeds for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMedians {
    pub div2: f64,
    pub mbleu4: f64,
    pub vocab_size: f64,
    pub pct_novel: f64,
}

impl ArmMedians {
    pub fn of(arms: &[&ArmResult]) -> Self {
        let m = |f: fn(&ArmResult) -> f64| median(&arms.iter().map(|a| f(a)).collect::<Vec<_>>());
        ArmMedians {
            div2: m(|a| a.div2),
            mbleu4: m(|a| a.mbleu4),
            vocab_size: m(|a| a.vocab_size as f64),
            pct_novel: m(|a| a.pct_novel),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn ablation_turns_off_sets_and_matching() {
        let c = ablation_config(&RunConfig::default());
        assert_eq!(c.model.set_size, 1);
        assert!(!c.train.feature_matching);
        c.validate().unwrap();
    }
}
