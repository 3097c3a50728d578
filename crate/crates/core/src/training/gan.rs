use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{Adversary, DStep, GStep};
use super::TrainConfig;
use crate::autodiff::Tape;
use crate::data::{Caption, DatasetItem, DatasetSplit, ImageFeatures, Vocabulary};
use crate::discriminator::{Discriminator, SentenceInput};
use crate::error::{Error, Result};
use crate::generator::{row_rngs, Generator};
use crate::losses::{discriminator_loss, generator_loss, BatchDistanceStats, PROB_EPS};
use crate::params::Adam;

/// Uniformly random permutation of `0..n` with no fixed point.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two elements");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// `p` references without replacement, in their stored order.
pub(crate) fn choose_set<'a>(refs: &'a [Caption], p: usize, rng: &mut impl Rng) -> Vec<&'a Caption> {
    if p == refs.len() {
        return refs.iter().collect();
    }
    let mut idx = index::sample(rng, refs.len(), p).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &refs[i]).collect()
}

/// Caption sets and their image features, grouped image by image.
#[derive(Default)]
pub(crate) struct SetBatch<'a> {
    pub captions: Vec<&'a Caption>,
    pub x: Vec<&'a [f64]>,
}

impl<'a> SetBatch<'a> {
    pub fn push_x(&mut self, x: &'a [f64]) {
        self.x.push(x);
    }

    pub fn extend(&mut self, set: Vec<&'a Caption>) {
        self.captions.extend(set);
    }
}

/// Adversarial trainer over one training split.
///
/// Each discriminator step scores, per image, a reference set, a set sampled
/// from the generator and the reference set of another image in the batch.
/// Each generator step unrolls the straight-through Gumbel sampler and
/// backpropagates the generator loss through a frozen discriminator.
pub struct GanTrainer<'a> {
    gen: Generator,
    disc: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    train: &'a DatasetSplit,
    train_refs: Vec<Vec<Caption>>,
    probe: Vec<&'a DatasetItem>,
    probe_refs: Vec<Vec<Caption>>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    probe_seed: u64,
}

impl<'a> GanTrainer<'a> {
    pub fn new(
        gen: Generator,
        disc: Discriminator,
        train: &'a DatasetSplit,
        val: &'a DatasetSplit,
        vocab: &Vocabulary,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = disc.config().set_size;
        if gen.config().vocab_size != disc.config().vocab_size || gen.config().vocab_size != vocab.len() {
            return Err(Error::Config("generator, discriminator and vocabulary sizes differ".into()));
        }
        if train.len() < cfg.batch_size {
            return Err(Error::Precondition(format!(
                "{} training images for batches of {}",
                train.len(),
                cfg.batch_size
            )));
        }
        let probe: Vec<&DatasetItem> = val.items.iter().take(cfg.probe_images).collect();
        if probe.len() < 2 {
            return Err(Error::Precondition("accuracy probe needs ≥ 2 held-out images".into()));
        }
        let train_refs: Vec<Vec<Caption>> = train.items.iter().map(|it| it.encoded_references(vocab)).collect();
        let probe_refs: Vec<Vec<Caption>> = probe.iter().map(|it| it.encoded_references(vocab)).collect();
        if let Some(r) = train_refs.iter().chain(&probe_refs).find(|r| r.len() < p) {
            return Err(Error::Precondition(format!("set size {p} exceeds an image's {} references", r.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_seed = rng.random();
        Ok(GanTrainer {
            g_opt: Adam::new(cfg.adam(cfg.g_learning_rate), gen.params()),
            d_opt: Adam::new(cfg.adam(cfg.d_learning_rate), disc.params()),
            gen,
            disc,
            train,
            train_refs,
            probe,
            probe_refs,
            cfg: cfg.clone(),
            rng,
            probe_seed,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn into_models(self) -> (Generator, Discriminator) {
        (self.gen, self.disc)
    }

    fn set_size(&self) -> usize {
        self.disc.config().set_size
    }

    fn batch(&mut self) -> Vec<usize> {
        let mut idx = index::sample(&mut self.rng, self.train.len(), self.cfg.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Sampled sets for `items`, each image repeated `p` times.
    fn sample_sets(gen: &Generator, items: &[&ImageFeatures], p: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Caption>> {
        let rows: Vec<&ImageFeatures> = items.iter().flat_map(|x| std::iter::repeat(*x).take(p)).collect();
        let mut rngs = row_rngs(rng, rows.len());
        Ok(gen.sample_rows(&rows, &mut rngs)?.into_iter().map(|s| s.caption).collect())
    }
}

/// Accuracy over `[real | generated | mismatched]` probabilities.
fn three_way_accuracy(probs: &[f64], g: usize) -> f64 {
    let correct = probs[..g].iter().filter(|&&v| v > 0.5).count()
        + probs[g..].iter().filter(|&&v| v < 0.5).count();
    correct as f64 / probs.len() as f64
}

impl Adversary for GanTrainer<'_> {
    fn d_step(&mut self) -> Result<DStep> {
        let p = self.set_size();
        let idx = self.batch();
        let g = idx.len();
        let feats: Vec<&ImageFeatures> = idx.iter().map(|&i| &self.train.items[i].features).collect();
        let generated = Self::sample_sets(&self.gen, &feats, p, &mut self.rng)?;
        let perm = derangement(g, &mut self.rng);

        let mut caps: Vec<&Caption> = Vec::with_capacity(3 * g * p);
        for &i in &idx {
            caps.extend(choose_set(&self.train_refs[i], p, &mut self.rng));
        }
        caps.extend(generated.iter());
        for &j in &perm {
            caps.extend(choose_set(&self.train_refs[idx[j]], p, &mut self.rng));
        }
        let x1: Vec<&[f64]> = feats.iter().map(|f| f.x_c.as_slice()).collect();
        let x: Vec<&[f64]> = x1.iter().chain(&x1).chain(&x1).copied().collect();

        let mut tape = Tape::new();
        let vars = self.disc.bind(&mut tape, true)?;
        let out = self.disc.discriminate(&mut tape, &vars, &SentenceInput::Ids(&caps), &x)?;
        let accuracy = three_way_accuracy(tape.value(out.prob_real).data(), g);
        let real = tape.gather_rows(out.prob_real, &(0..g).collect::<Vec<_>>())?;
        let fake_g = tape.gather_rows(out.prob_real, &(g..2 * g).collect::<Vec<_>>())?;
        let fake_f = tape.gather_rows(out.prob_real, &(2 * g..3 * g).collect::<Vec<_>>())?;
        let loss = discriminator_loss(&mut tape, real, fake_g, fake_f)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.d_opt.update(self.disc.params_mut(), &vars.bound, &grads)?;
        Ok(DStep { loss: value, accuracy })
    }

    fn g_step(&mut self) -> Result<GStep> {
        let p = self.set_size();
        let idx = self.batch();
        let feats: Vec<&ImageFeatures> = idx.iter().map(|&i| &self.train.items[i].features).collect();
        let rows: Vec<&ImageFeatures> = feats.iter().flat_map(|x| std::iter::repeat(*x).take(p)).collect();
        let mut rngs = row_rngs(&mut self.rng, rows.len());
        let mut real: Vec<&Caption> = Vec::with_capacity(idx.len() * p);
        for &i in &idx {
            real.extend(choose_set(&self.train_refs[i], p, &mut self.rng));
        }
        let x: Vec<&[f64]> = feats.iter().map(|f| f.x_c.as_slice()).collect();

        let mut tape = Tape::new();
        let gvars = self.gen.bind(&mut tape, true)?;
        let dvars = self.disc.bind(&mut tape, false)?;
        let soft = self.gen.gumbel_unroll(&mut tape, &gvars, &rows, &mut rngs, true)?;
        let out_g = self.disc.discriminate(&mut tape, &dvars, &SentenceInput::Rows(&soft), &x)?;
        let out_r = self.disc.discriminate(&mut tape, &dvars, &SentenceInput::Ids(&real), &x)?;
        let stats_g = BatchDistanceStats::from_output(&mut tape, &out_g)?;
        let stats_r = BatchDistanceStats::from_output(&mut tape, &out_r)?;
        let loss = generator_loss(&mut tape, out_g.prob_real, &stats_g, &stats_r, self.cfg.feature_matching)?;
        let value = tape.value(loss).item();
        let adversarial = -tape
            .value(out_g.prob_real)
            .data()
            .iter()
            .map(|d| d.clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
            .sum::<f64>()
            / idx.len() as f64;

        let grads = tape.backward(loss)?;
        if let Some(v) = dvars.bound.vars().iter().find(|&&v| grads.get(v).is_some()) {
            return Err(Error::Contract(format!("generator loss reached discriminator leaf {}", v.index())));
        }
        self.g_opt.update(self.gen.params_mut(), &gvars.bound, &grads)?;
        Ok(GStep {
            loss: value,
            adversarial,
            feature_matching: value - adversarial,
        })
    }

    fn probe(&mut self) -> Result<f64> {
        let p = self.set_size();
        let g = self.probe.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.probe_seed);
        let feats: Vec<&ImageFeatures> = self.probe.iter().map(|it| &it.features).collect();
        let generated = Self::sample_sets(&self.gen, &feats, p, &mut rng)?;
        let mut caps: Vec<&Caption> = Vec::with_capacity(3 * g * p);
        for r in &self.probe_refs {
            caps.extend(r[..p].iter());
        }
        caps.extend(generated.iter());
        for i in 0..g {
            caps.extend(self.probe_refs[(i + 1) % g][..p].iter());
        }
        let x1: Vec<&[f64]> = feats.iter().map(|f| f.x_c.as_slice()).collect();
        let x: Vec<&[f64]> = x1.iter().chain(&x1).chain(&x1).copied().collect();
        let probs = self.disc.score(&caps, &x)?;
        Ok(three_way_accuracy(&probs, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..12 {
            for _ in 0..50 {
                let d = derangement(n, &mut rng);
                let mut sorted = d.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                assert!(d.iter().enumerate().all(|(i, &j)| i != j));
            }
        }
    }

    #[test]
    fn derangements_of_three_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = 0;
        let n = 20_000;
        for _ in 0..n {
            if derangement(3, &mut rng) == vec![1, 2, 0] {
                a += 1;
            }
        }
        assert!((a as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn choose_set_is_a_subset_without_repeats() {
        let refs: Vec<Caption> = (0..5).map(|i| Caption::new(vec![i + 4])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(choose_set(&refs, 5, &mut rng).len(), 5);
        for _ in 0..20 {
            let s = choose_set(&refs, 3, &mut rng);
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0].tokens < w[1].tokens));
        }
    }
}
