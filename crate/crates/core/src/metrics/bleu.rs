use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// How zero modified precisions are handled before the geometric mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// A zero precision makes the whole score zero.
    None,
    /// A zero precision is replaced by `1 / (2 · candidate_length)`.
    #[default]
    HalfInverseLength,
}

pub(crate) fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions up to `max_n` and a brevity penalty.
///
/// The effective reference length is the reference length closest to the
/// candidate's, shorter on ties.
pub fn bleu<T: Ord, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("BLEU needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Parameter("max_n must be ≥ 1".into()));
    }
    let c = candidate.len();
    if c == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
        for r in references {
            for (g, k) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if clipped == 0 {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::HalfInverseLength => 1.0 / (2.0 * c as f64),
            }
        } else {
            clipped as f64 / total as f64
        };
        log_sum += precision.ln();
    }

    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}
