use std::collections::BTreeSet;

use super::bleu::{bleu, Smoothing};
use crate::error::{Error, Result};

/// Distinct n-grams across the set divided by the total number of words in the set.
///
/// The denominator is the word count for every `n`.
pub fn div_n<T: Ord, S: AsRef<[T]>>(set: &[S], n: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("div_n of an empty caption set".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("n must be ≥ 1".into()));
    }
    let mut distinct: BTreeSet<&[T]> = BTreeSet::new();
    let mut words = 0;
    for s in set {
        let s = s.as_ref();
        if s.is_empty() {
            return Err(Error::Contract("div_n over an empty caption".into()));
        }
        words += s.len();
        if s.len() >= n {
            distinct.extend(s.windows(n));
        }
    }
    Ok(distinct.len() as f64 / words as f64)
}

/// Mean BLEU of each caption scored against the remaining `p − 1` captions.
pub fn mbleu<T: Ord, S: AsRef<[T]>>(set: &[S], max_n: usize) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::Contract(format!(
            "mBleu needs at least 2 captions, got {}",
            set.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..set.len() {
        let rest: Vec<&[T]> = set
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.as_ref())
            .collect();
        total += bleu(set[i].as_ref(), &rest, max_n, Smoothing::default())?;
    }
    Ok(total / set.len() as f64)
}
