//! Token accuracy and corpus BLEU.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Fraction of reference positions whose hypothesis token matches exactly.
/// Missing hypothesis tokens count as wrong; extra ones are ignored.
pub fn token_accuracy(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("token accuracy over an empty reference corpus"));
    }
    let correct: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / total as f64)
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped n-gram precisions, brevity penalty
/// `exp(1 - r/c)` when `c < r`, and no smoothing. Returned in `[0, 1]`.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU over an empty hypothesis corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(Error::contract("max_n must be positive"));
    }
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let r = vec![vec![1, 2, 3, 4]];
        assert_eq!(token_accuracy(&r, &r).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[vec![5, 6, 7, 8]], &r).unwrap(), 0.0);
        assert_eq!(token_accuracy(&[vec![1, 2, 9, 4]], &r).unwrap(), 0.75);
        assert_eq!(token_accuracy(&[vec![1, 2]], &r).unwrap(), 0.5);
        assert!(token_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn identical_corpus_scores_one() {
        let r = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((corpus_bleu(&r, &r, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_hypothesis_gets_brevity_penalty() {
        let r = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let h = vec![vec![1, 2, 3, 4, 5, 6]];
        let expected = (1.0f64 - 8.0 / 6.0).exp();
        assert!((corpus_bleu(&h, &r, 4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_four_grams_give_zero() {
        let r = vec![vec![1, 2, 3]];
        assert_eq!(corpus_bleu(&r, &r, 4).unwrap(), 0.0);
        assert!(corpus_bleu(&[], &[], 4).is_err());
    }
}
