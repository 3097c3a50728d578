use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ngram: String,
    pub n: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub expected: f64,
    pub ratio: f64,
}

/// Mean count ratio over n-grams whose training count falls in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBin {
    pub lo: usize,
    pub hi: usize,
    pub mean_ratio: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Observed vs. training-frequency-expected n-gram counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRatioTable {
    pub n: usize,
    pub min_train_count: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub rows: Vec<RatioRow>,
    pub bins: Vec<RatioBin>,
    pub histogram: Histogram,
}

impl CountRatioTable {
    pub fn mean_ratio(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.ratio).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ngram,n,train_count,test_count,expected,ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "\"{}\",{},{},{},{},{}\n",
                r.ngram.replace('"', "\"\""),
                r.n,
                r.train_count,
                r.test_count,
                r.expected,
                r.ratio
            ));
        }
        s
    }
}

/// Histogram edges 0.0, 0.1, …, 3.0; the last bin also collects everything above.
fn histogram(ratios: impl Iterator<Item = f64>) -> Histogram {
    let edges: Vec<f64> = (0..=30).map(|i| i as f64 / 10.0).collect();
    let mut counts = vec![0; edges.len() - 1];
    for r in ratios {
        let idx = ((r * 10.0).floor() as usize).min(counts.len() - 1);
        counts[idx] += 1;
    }
    Histogram { edges, counts }
}

/// Power-of-two bins over training counts.
fn bins(rows: &[RatioRow]) -> Vec<RatioBin> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let b = usize::BITS - 1 - r.train_count.leading_zeros();
        let e = acc.entry(b).or_insert((0.0, 0));
        e.0 += r.ratio;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(b, (sum, count))| RatioBin {
            lo: 1 << b,
            hi: 1 << (b + 1),
            mean_ratio: sum / count as f64,
            count,
        })
        .collect()
}

/// Ratio of each n-gram's count in `generated` to `m · |generated| / |training|`,
/// where `m` is its training count and `|·|` counts sentences.
pub fn count_ratios<S: AsRef<[String]>, R: AsRef<[String]>>(
    generated: &[S],
    training: &[R],
    n: usize,
    min_train_count: usize,
) -> Result<CountRatioTable> {
    if generated.is_empty() || training.is_empty() {
        return Err(Error::Contract("count ratios need non-empty corpora".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("n must be ≥ 1".into()));
    }
    if min_train_count == 0 {
        return Err(Error::Parameter("min_train_count must be ≥ 1".into()));
    }
    let count = |corpus: &mut dyn Iterator<Item = &[String]>| {
        let mut m: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for s in corpus {
            if s.len() >= n {
                for w in s.windows(n) {
                    *m.entry(w.to_vec()).or_default() += 1;
                }
            }
        }
        m
    };
    let train_counts = count(&mut training.iter().map(|s| s.as_ref()));
    let test_counts = count(&mut generated.iter().map(|s| s.as_ref()));
    let (nt, ng) = (training.len() as f64, generated.len() as f64);

    let rows: Vec<RatioRow> = train_counts
        .iter()
        .filter(|&(_, &m)| m >= min_train_count)
        .map(|(g, &m)| {
            let observed = test_counts.get(g).copied().unwrap_or(0);
            let expected = m as f64 * ng / nt;
            RatioRow {
                ngram: g.join(" "),
                n,
                train_count: m,
                test_count: observed,
                expected,
                ratio: observed as f64 / expected,
            }
        })
        .collect();

    Ok(CountRatioTable {
        n,
        min_train_count,
        train_sentences: training.len(),
        test_sentences: generated.len(),
        bins: bins(&rows),
        histogram: histogram(rows.iter().map(|r| r.ratio)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn caps(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn arithmetic_example() {
        // "dog" appears 200 times in 1000 training captions; 25 times in 100 test captions.
        let mut train = vec![vec!["dog".to_string()]; 200];
        train.extend(vec![vec!["cat".to_string()]; 800]);
        let mut test = vec![vec!["dog".to_string()]; 25];
        test.extend(vec![vec!["cat".to_string()]; 75]);
        let t = count_ratios(&test, &train, 1, 5).unwrap();
        let dog = t.rows.iter().find(|r| r.ngram == "dog").unwrap();
        assert_eq!(dog.expected, 20.0);
        assert_eq!(dog.ratio, 1.25);
    }

    #[test]
    fn self_comparison_is_exactly_one() {
        let c = caps(&["a dog runs", "a dog sits", "the cat runs", "a bird"]);
        for n in 1..=3 {
            let t = count_ratios(&c, &c, n, 1).unwrap();
            assert!(!t.rows.is_empty());
            assert!(t.rows.iter().all(|r| r.ratio == 1.0));
        }
    }

    #[test]
    fn min_train_count_filters_rows() {
        let c = caps(&["a a a b"]);
        let t = count_ratios(&c, &c, 1, 2).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].ngram, "a");
    }

    #[test]
    fn bootstrap_resample_is_near_one() {
        let words = ["a", "dog", "cat", "runs", "sits", "the", "park", "on", "grass", "red"];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let train: Vec<Vec<String>> = (0..2000)
            .map(|_| (0..6).map(|_| words[rng.random_range(0..words.len())].to_string()).collect())
            .collect();
        let test: Vec<Vec<String>> = (0..2000)
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let t = count_ratios(&test, &train, 1, 5).unwrap();
        assert!((t.mean_ratio() - 1.0).abs() < 0.05, "{}", t.mean_ratio());
    }

    #[test]
    fn empty_corpora_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(count_ratios(&empty, &caps(&["a"]), 1, 1).is_err());
        assert!(count_ratios(&caps(&["a"]), &empty, 1, 1).is_err());
    }

    #[test]
    fn bins_and_histogram_cover_all_rows() {
        let c = caps(&["a a a a b b c", "a b c d"]);
        let t = count_ratios(&c, &c, 1, 1).unwrap();
        assert_eq!(t.bins.iter().map(|b| b.count).sum::<usize>(), t.rows.len());
        assert_eq!(t.histogram.counts.iter().sum::<usize>(), t.rows.len());
        assert_eq!(t.histogram.edges.len(), t.histogram.counts.len() + 1);
    }
}
