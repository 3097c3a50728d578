//! Decoding strategies, selectable by name.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{log_softmax_row, row_rngs, Generator, Stepper};
use crate::autodiff::Tensor;
use crate::data::{Caption, ImageFeatures, END};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCaption {
    pub caption: Caption,
    /// Sum of per-step log probabilities of the emitted tokens, END included.
    pub log_prob: f64,
}

impl ScoredCaption {
    /// Log probability per emitted step.
    pub fn normalized(&self) -> f64 {
        let steps = self.caption.len() + usize::from(!self.caption.truncated);
        self.log_prob / steps.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Captions kept per image.
    pub p: usize,
    pub beam_width: usize,
    /// Rank by per-step rather than total log probability.
    pub length_normalize: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            p: 5,
            beam_width: 5,
            length_normalize: false,
        }
    }
}

/// Produces a ranked caption list per image, best first.
pub trait DecodeStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn decode(
        &self,
        gen: &Generator,
        images: &[&ImageFeatures],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<ScoredCaption>>>;
}

type Factory = fn(&DecodeOptions) -> Result<Box<dyn DecodeStrategy>>;

/// Name → decoding strategy constructor.
pub struct DecoderRegistry {
    entries: Vec<(&'static str, Factory)>,
}

impl Default for DecoderRegistry {
    fn default() -> Self {
        let mut r = DecoderRegistry { entries: Vec::new() };
        r.register("sample", |o| {
            Ok(Box::new(Sample {
                p: o.p,
                length_normalize: o.length_normalize,
            }))
        });
        r.register("greedy", |_| Ok(Box::new(Greedy)));
        r.register("beam", |o| {
            if o.p > o.beam_width {
                return Err(Error::Config(format!(
                    "cannot keep {} captions from a beam of width {}",
                    o.p, o.beam_width
                )));
            }
            Ok(Box::new(Beam {
                width: o.beam_width,
                keep: o.p,
            }))
        });
        r
    }
}

impl DecoderRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, options: &DecodeOptions) -> Result<Box<dyn DecodeStrategy>> {
        if options.p == 0 {
            return Err(Error::Config("p must be ≥ 1".into()));
        }
        let (_, f) = self.entries.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!("unknown decoding mode `{name}` (expected one of {})", self.names().join(", ")))
        })?;
        f(options)
    }
}

const CHUNK_ROWS: usize = 512;

/// Independent samples, `p` per image, ranked by log probability.
pub struct Sample {
    pub p: usize,
    pub length_normalize: bool,
}

impl DecodeStrategy for Sample {
    fn name(&self) -> &str {
        "sample"
    }

    fn decode(
        &self,
        gen: &Generator,
        images: &[&ImageFeatures],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<ScoredCaption>>> {
        let rows: Vec<&ImageFeatures> = images.iter().flat_map(|&f| std::iter::repeat_n(f, self.p)).collect();
        let mut rngs = row_rngs(rng, rows.len());
        let mut flat = gen.sample_rows(&rows, &mut rngs)?.into_iter();
        let mut out = Vec::with_capacity(images.len());
        for _ in images {
            let mut set: Vec<ScoredCaption> = flat.by_ref().take(self.p).collect();
            let key = |s: &ScoredCaption| if self.length_normalize { s.normalized() } else { s.log_prob };
            set.sort_by(|a, b| key(b).total_cmp(&key(a)));
            out.push(set);
        }
        Ok(out)
    }
}

/// Most probable word at each step, with zero noise.
pub struct Greedy;

impl DecodeStrategy for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn decode(
        &self,
        gen: &Generator,
        images: &[&ImageFeatures],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<ScoredCaption>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK_ROWS) {
            let mut stepper = Stepper::new(gen, chunk, gen.zero_noise(chunk.len()))?;
            let mut logits = stepper.first()?;
            let mut caps: Vec<ScoredCaption> = (0..chunk.len())
                .map(|_| ScoredCaption {
                    caption: Caption {
                        tokens: Vec::new(),
                        truncated: true,
                    },
                    log_prob: 0.0,
                })
                .collect();
            for step in 0..gen.config.steps() {
                let mut next = Vec::with_capacity(chunk.len());
                for (r, cap) in caps.iter_mut().enumerate() {
                    let row = logits.row(r);
                    let k = super::argmax(row);
                    if cap.caption.truncated {
                        cap.log_prob += log_softmax_row(row, gen.config.beta)[k];
                        if k == END as usize {
                            cap.caption.truncated = false;
                        } else {
                            cap.caption.tokens.push(k as u32);
                        }
                    }
                    next.push(k as u32);
                }
                if step + 1 == gen.config.steps() || caps.iter().all(|c| !c.caption.truncated) {
                    break;
                }
                logits = stepper.next(&next)?;
            }
            out.extend(caps.into_iter().map(|c| vec![c]));
        }
        Ok(out)
    }
}

/// Breadth-limited search over total log probability with zero noise.
pub struct Beam {
    pub width: usize,
    /// Finished hypotheses returned per image.
    pub keep: usize,
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

impl Beam {
    fn search(&self, gen: &Generator, image: &ImageFeatures) -> Result<Vec<ScoredCaption>> {
        let mut stepper = Stepper::new(gen, &[image], gen.zero_noise(1))?;
        let mut logits = stepper.first()?;
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
        }];
        let mut finished: Vec<ScoredCaption> = Vec::new();
        for step in 0..gen.config.steps() {
            // (score, parent, token)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (i, h) in live.iter().enumerate() {
                for (k, lp) in log_softmax_row(logits.row(i), gen.config.beta).into_iter().enumerate() {
                    cands.push((h.score + lp, i, k));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
            cands.truncate(self.width);
            let mut next_live = Vec::new();
            let mut parents = Vec::new();
            for (score, parent, k) in cands {
                let mut tokens = live[parent].tokens.clone();
                if k == END as usize {
                    finished.push(ScoredCaption {
                        caption: Caption::new(tokens),
                        log_prob: score,
                    });
                } else {
                    tokens.push(k as u32);
                    next_live.push(Hyp { tokens, score });
                    parents.push(parent);
                }
            }
            live = next_live;
            let best_finished = finished.iter().map(|f| f.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.is_empty() || finished.len() >= self.width || best_finished >= best_live || step + 1 == gen.config.steps() {
                break;
            }
            stepper.select_rows(&parents);
            let last: Vec<u32> = live.iter().map(|h| *h.tokens.last().unwrap_or(&END)).collect();
            logits = stepper.next(&last)?;
        }
        if finished.len() < self.keep {
            finished.extend(live.into_iter().map(|h| ScoredCaption {
                caption: Caption {
                    tokens: h.tokens,
                    truncated: true,
                },
                log_prob: h.score,
            }));
        }
        // Stable: equal scores keep discovery order.
        finished.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        finished.truncate(self.keep);
        Ok(finished)
    }
}

impl DecodeStrategy for Beam {
    fn name(&self) -> &str {
        "beam"
    }

    fn decode(
        &self,
        gen: &Generator,
        images: &[&ImageFeatures],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<ScoredCaption>>> {
        if self.width == 0 || self.keep == 0 {
            return Err(Error::Config("beam width and kept captions must be ≥ 1".into()));
        }
        images.iter().map(|img| self.search(gen, img)).collect()
    }
}

impl Generator {
    pub(crate) fn zero_noise(&self, rows: usize) -> Option<Tensor> {
        (self.config.noise_dim > 0).then(|| Tensor::zeros(&[rows, self.config.noise_dim]))
    }

    /// Ancestral sampling at the configured β, one rng per row. Each row
    /// draws its noise vector first, then one uniform per step.
    pub fn sample_rows<R: Rng>(&self, rows: &[&ImageFeatures], rngs: &mut [R]) -> Result<Vec<ScoredCaption>> {
        if rows.len() != rngs.len() {
            return Err(Error::Contract("sample_rows needs one rng per row".into()));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (chunk, chunk_rngs) in rows.chunks(CHUNK_ROWS).zip(rngs.chunks_mut(CHUNK_ROWS)) {
            let noise = self.draw_noise(chunk_rngs);
            let mut stepper = Stepper::new(self, chunk, noise)?;
            let mut logits = stepper.first()?;
            let mut caps: Vec<ScoredCaption> = (0..chunk.len())
                .map(|_| ScoredCaption {
                    caption: Caption {
                        tokens: Vec::new(),
                        truncated: true,
                    },
                    log_prob: 0.0,
                })
                .collect();
            for step in 0..self.config.steps() {
                let mut next = Vec::with_capacity(chunk.len());
                for (r, cap) in caps.iter_mut().enumerate() {
                    if !cap.caption.truncated {
                        next.push(END);
                        continue;
                    }
                    let lp = log_softmax_row(logits.row(r), self.config.beta);
                    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                    let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numerical(format!("sampling distribution: {e}")))?;
                    let k = dist.sample(&mut chunk_rngs[r]);
                    cap.log_prob += lp[k];
                    if k == END as usize {
                        cap.caption.truncated = false;
                    } else {
                        cap.caption.tokens.push(k as u32);
                    }
                    next.push(k as u32);
                }
                if step + 1 == self.config.steps() || caps.iter().all(|c| !c.caption.truncated) {
                    break;
                }
                logits = stepper.next(&next)?;
            }
            out.extend(caps);
        }
        Ok(out)
    }

    /// `p` independently sampled captions for one image, in draw order.
    pub fn generate_set(&self, x: &ImageFeatures, p: usize, rng: &mut impl Rng) -> Result<Vec<ScoredCaption>> {
        if p == 0 {
            return Err(Error::Contract("caption set size must be ≥ 1".into()));
        }
        let rows = vec![x; p];
        let mut rngs = row_rngs(rng, p);
        self.sample_rows(&rows, &mut rngs)
    }

    /// Best caption for one image under `strategy`.
    pub fn generate_caption(
        &self,
        x: &ImageFeatures,
        strategy: &dyn DecodeStrategy,
        rng: &mut ChaCha8Rng,
    ) -> Result<ScoredCaption> {
        let mut sets = strategy.decode(self, &[x], rng)?;
        sets.pop()
            .and_then(|mut s| (!s.is_empty()).then(|| s.swap_remove(0)))
            .ok_or_else(|| Error::Contract("decoder returned no caption".into()))
    }
}
