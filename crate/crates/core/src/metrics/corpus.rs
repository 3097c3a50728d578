use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of distinct words whose corpus count is at least `k`, as a step function of `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabCurve {
    /// Word counts, sorted descending.
    counts: Vec<usize>,
}

impl VocabCurve {
    pub fn from_counts<I: IntoIterator<Item = usize>>(counts: I) -> Self {
        let mut counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        VocabCurve { counts }
    }

    pub fn at(&self, k: usize) -> usize {
        self.counts.partition_point(|&c| c >= k)
    }

    /// The curve at every breakpoint (each distinct count, plus one past the maximum).
    pub fn points(&self) -> BTreeMap<usize, usize> {
        let mut ks: BTreeSet<usize> = self.counts.iter().copied().collect();
        ks.insert(1);
        ks.insert(self.counts.first().copied().unwrap_or(0) + 1);
        ks.into_iter().map(|k| (k, self.at(k))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub vocab_size: usize,
    /// Percentage of generated captions whose token sequence never occurs in training.
    pub pct_novel: f64,
    pub vocab_curve: VocabCurve,
    pub num_captions: usize,
}

pub fn corpus_stats<S: AsRef<[String]>, R: AsRef<[String]>>(
    generated: &[S],
    training: &[R],
) -> Result<CorpusStats> {
    if generated.is_empty() {
        return Err(Error::Contract("corpus statistics of an empty corpus".into()));
    }
    let seen: BTreeSet<&[String]> = training.iter().map(|c| c.as_ref()).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut novel = 0usize;
    for c in generated {
        let c = c.as_ref();
        for t in c {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        if !seen.contains(c) {
            novel += 1;
        }
    }
    Ok(CorpusStats {
        vocab_size: counts.len(),
        pct_novel: 100.0 * novel as f64 / generated.len() as f64,
        vocab_curve: VocabCurve::from_counts(counts.into_values()),
        num_captions: generated.len(),
    })
}

/// Exact-duplicate caption counts, most frequent first, ties by caption text.
pub fn repeated_caption_table<S: AsRef<str>>(generated: &[S]) -> Result<Vec<(String, usize)>> {
    if generated.is_empty() {
        return Err(Error::Contract("repeated-caption table of an empty corpus".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in generated {
        *counts.entry(c.as_ref()).or_default() += 1;
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().map(|(c, n)| (c.to_string(), n)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn caps(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn curve_hand_count() {
        let curve = VocabCurve::from_counts([5, 2, 1]);
        assert_eq!(curve.at(1), 3);
        assert_eq!(curve.at(2), 2);
        assert_eq!(curve.at(3), 1);
        assert_eq!(curve.at(6), 0);
        let pts = curve.points();
        assert_eq!(pts[&1], 3);
        assert_eq!(pts[&6], 0);
    }

    #[test]
    fn subset_of_training_is_not_novel() {
        let train = caps(&["a dog runs", "a cat sits", "a bird"]);
        let gen = caps(&["a cat sits", "a dog runs"]);
        let s = corpus_stats(&gen, &train).unwrap();
        assert_eq!(s.pct_novel, 0.0);
        assert_eq!(s.vocab_size, 5);
        assert_eq!(s.vocab_curve.at(1), s.vocab_size);
        let gen = caps(&["a cat runs", "a dog runs"]);
        assert_eq!(corpus_stats(&gen, &train).unwrap().pct_novel, 50.0);
    }

    #[test]
    fn empty_generated_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(corpus_stats(&empty, &caps(&["a"])).is_err());
    }

    #[test]
    fn repeated_table_orders_by_count_then_text() {
        let mut corpus = vec!["a man riding a wave on top of a surfboard"; 54];
        corpus.extend(["b", "a", "b"]);
        let t = repeated_caption_table(&corpus).unwrap();
        assert_eq!(t[0], ("a man riding a wave on top of a surfboard".to_string(), 54));
        assert_eq!(t[1], ("b".to_string(), 2));
        assert_eq!(t[2], ("a".to_string(), 1));
        let distinct = repeated_caption_table(&["x", "y", "z"]).unwrap();
        assert!(distinct.iter().all(|(_, n)| *n == 1));
    }

    #[test]
    fn repeated_table_matches_construction() {
        let built = [("red dog", 7usize), ("blue cat", 3), ("a bird", 3), ("the cow", 1)];
        let mut corpus = Vec::new();
        for (c, n) in built {
            for _ in 0..n {
                corpus.push(c);
            }
        }
        let t = repeated_caption_table(&corpus).unwrap();
        assert_eq!(
            t,
            vec![
                ("red dog".to_string(), 7),
                ("a bird".to_string(), 3),
                ("blue cat".to_string(), 3),
                ("the cow".to_string(), 1)
            ]
        );
    }

    proptest! {
        #[test]
        fn curve_non_increasing(counts in proptest::collection::vec(1usize..50, 1..30)) {
            let curve = VocabCurve::from_counts(counts.clone());
            prop_assert_eq!(curve.at(1), counts.len());
            let mut prev = usize::MAX;
            for k in 1..60 {
                let v = curve.at(k);
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
