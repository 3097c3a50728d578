//! Diversity and n-gram statistics for caption corpora.
//!
//! Per-set metrics are registered by name in a [`MetricRegistry`] so reports
//! and the command line can select them at runtime.

mod bleu;
mod corpus;
mod diversity;
mod ratios;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, Smoothing};
pub use corpus::{corpus_stats, repeated_caption_table, CorpusStats, VocabCurve};
pub use diversity::{div_n, mbleu};
pub use ratios::{count_ratios, CountRatioTable, Histogram, RatioBin, RatioRow};

use crate::error::{Error, Result};

/// A statistic of one image's caption set.
pub trait SetMetric: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, set: &[Vec<String>]) -> Result<f64>;
    /// Smallest set size the metric is defined for.
    fn min_set_size(&self) -> usize {
        1
    }
}

pub struct DivN(pub usize);

impl SetMetric for DivN {
    fn name(&self) -> &str {
        match self.0 {
            1 => "div1",
            2 => "div2",
            _ => "divn",
        }
    }

    fn evaluate(&self, set: &[Vec<String>]) -> Result<f64> {
        div_n(set, self.0)
    }
}

pub struct MBleu(pub usize);

impl SetMetric for MBleu {
    fn name(&self) -> &str {
        "mbleu4"
    }

    fn evaluate(&self, set: &[Vec<String>]) -> Result<f64> {
        mbleu(set, self.0)
    }

    fn min_set_size(&self) -> usize {
        2
    }
}

/// Name → per-set metric lookup.
pub struct MetricRegistry {
    metrics: Vec<Box<dyn SetMetric>>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = MetricRegistry { metrics: Vec::new() };
        r.register(Box::new(DivN(1)));
        r.register(Box::new(DivN(2)));
        r.register(Box::new(MBleu(4)));
        r
    }
}

impl MetricRegistry {
    pub fn empty() -> Self {
        MetricRegistry { metrics: Vec::new() }
    }

    /// Adds a metric, replacing any existing one with the same name.
    pub fn register(&mut self, metric: Box<dyn SetMetric>) {
        self.metrics.retain(|m| m.name() != metric.name());
        self.metrics.push(metric);
    }

    pub fn get(&self, name: &str) -> Option<&dyn SetMetric> {
        self.metrics.iter().find(|m| m.name() == name).map(|m| m.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.iter().map(|m| m.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn SetMetric> {
        self.metrics.iter().map(|m| m.as_ref())
    }
}

/// Caption sets keyed by image id, in tokenized form.
pub type SetsByImage = BTreeMap<u64, Vec<Vec<String>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDiversity {
    pub image_id: u64,
    pub values: BTreeMap<String, f64>,
}

/// Per-image set diversity plus corpus-level vocabulary and novelty.
///
/// Image-level values are averaged with equal weight per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_image: Vec<ImageDiversity>,
    pub mean: BTreeMap<String, f64>,
    pub corpus: CorpusStats,
}

impl DiversityReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.mean.get(name).copied()
    }

    pub fn div1(&self) -> Option<f64> {
        self.metric("div1")
    }

    pub fn div2(&self) -> Option<f64> {
        self.metric("div2")
    }

    pub fn mbleu4(&self) -> Option<f64> {
        self.metric("mbleu4")
    }

    pub fn vocab_size(&self) -> usize {
        self.corpus.vocab_size
    }

    pub fn pct_novel(&self) -> f64 {
        self.corpus.pct_novel
    }

    pub fn per_image_csv(&self) -> String {
        let names: Vec<&String> = self.mean.keys().collect();
        let mut s = String::from("image_id");
        for n in &names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for img in &self.per_image {
            s.push_str(&img.image_id.to_string());
            for n in &names {
                s.push(',');
                if let Some(v) = img.values.get(*n) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every registered metric on each image's set, plus corpus statistics
/// over all captions. Metrics whose minimum set size exceeds a set are skipped
/// for that image.
pub fn diversity_report(
    sets: &SetsByImage,
    training: &[Vec<String>],
    registry: &MetricRegistry,
) -> Result<DiversityReport> {
    if sets.is_empty() {
        return Err(Error::Contract("diversity report over zero images".into()));
    }
    let mut per_image = Vec::with_capacity(sets.len());
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (&image_id, set) in sets {
        let mut values = BTreeMap::new();
        for m in registry.iter() {
            if set.len() < m.min_set_size() {
                continue;
            }
            let v = m.evaluate(set)?;
            values.insert(m.name().to_string(), v);
            let e = sums.entry(m.name().to_string()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        per_image.push(ImageDiversity { image_id, values });
    }
    let mean = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let all: Vec<&Vec<String>> = sets.values().flatten().collect();
    let corpus = corpus_stats(&all, training)?;
    Ok(DiversityReport {
        per_image,
        mean,
        corpus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn registry_lookup() {
        let r = MetricRegistry::default();
        assert_eq!(r.names(), vec!["div1", "div2", "mbleu4"]);
        let s = caps(&["a b c"; 5]);
        assert_eq!(r.get("div1").unwrap().evaluate(&s).unwrap(), 0.2);
        assert!(r.get("cider").is_none());
    }

    #[test]
    fn singleton_sets_skip_mbleu() {
        let mut sets = SetsByImage::new();
        sets.insert(1, caps(&["a dog"]));
        sets.insert(2, caps(&["a cat", "the cat"]));
        let rep = diversity_report(&sets, &caps(&["a dog"]), &MetricRegistry::default()).unwrap();
        assert!(!rep.per_image[0].values.contains_key("mbleu4"));
        assert!(rep.per_image[1].values.contains_key("mbleu4"));
        assert_eq!(rep.div1().unwrap(), (1.0 + 0.75) / 2.0);
        assert_eq!(rep.vocab_size(), 4);
        assert!((rep.pct_novel() - 200.0 / 3.0).abs() < 1e-12);
        assert!(rep.per_image_csv().starts_with("image_id,div1,div2,mbleu4\n"));
    }
}
