//! Corpus BLEU, ROUGE-L and tag-level clinical efficacy.
//!
//! BLEU pools clipped n-gram counts over the whole corpus before taking
//! ratios (corpus BLEU, not averaged sentence BLEU). ROUGE-L is the mean of
//! per-pair LCS F-scores with `beta = 1.2`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

fn check_pairs<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::DataLength {
            expected: references.len(),
            actual: candidates.len(),
        });
    }
    Ok(())
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-1 through BLEU-`max_n` over a single-reference corpus.
pub fn bleu<T: Ord>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<Vec<f64>> {
    check_pairs(candidates, references)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        libm::exp(1.0 - r_len as f64 / c_len as f64)
    };
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for (k, &p) in precisions.iter().enumerate() {
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += libm::log(p);
        }
        scores.push(if zero {
            0.0
        } else {
            bp * libm::exp(log_sum / (k + 1) as f64)
        });
    }
    Ok(scores)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-score of one pair.
pub fn rouge_l_pair<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L.
pub fn rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficacy {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Efficacy {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// A tag is predicted for a report iff any of its trigger tokens occurs in
/// it. Micro-averaged over (instance, tag) pairs of the lexicon.
pub fn tag_efficacy<S: AsRef<str>>(
    predicted_reports: &[Vec<S>],
    gold_tags: &[Vec<S>],
    lexicon: &[(String, Vec<String>)],
) -> Result<Efficacy> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    check_pairs(predicted_reports, gold_tags)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (report, gold) in predicted_reports.iter().zip(gold_tags) {
        for (tag, triggers) in lexicon {
            let predicted = report
                .iter()
                .any(|w| triggers.iter().any(|t| t == w.as_ref()));
            let truth = gold.iter().any(|g| g.as_ref() == tag);
            match (predicted, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(Efficacy::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub efficacy: Efficacy,
    pub count: usize,
}

pub fn evaluate(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    gold_tags: &[Vec<String>],
    lexicon: &[(String, Vec<String>)],
) -> Result<EvalReport> {
    let b = bleu(candidates, references, 4)?;
    Ok(EvalReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge_l(candidates, references)?,
        efficacy: tag_efficacy(candidates, gold_tags, lexicon)?,
        count: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity() {
        let b = bleu(&[toks("a b c d")], &[toks("a b c d")], 4).unwrap();
        assert_eq!(b, vec![1.0; 4]);
    }

    #[test]
    fn bleu_clipped_unigram() {
        let b = bleu(&[toks("a a a a")], &[toks("a b")], 4).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let b = bleu(&[toks("a b")], &[toks("a b c d")], 1).unwrap();
        assert!((b[0] - libm::exp(1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors() {
        assert_eq!(bleu::<String>(&[], &[], 4), Err(Error::EmptyCorpus));
        assert!(bleu(&[toks("a")], &[toks("a"), toks("b")], 4).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[toks("x y z")], &[toks("x y z")]).unwrap(), 1.0);
        let r = rouge_l(&[toks("a b c")], &[toks("a c b")]).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[toks("a b")], &[toks("c d")]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[toks("")], &[toks("c d")]).unwrap(), 0.0);
    }

    fn lexicon() -> Vec<(String, Vec<String>)> {
        vec![
            ("A".to_string(), vec!["a".to_string()]),
            ("B".to_string(), vec!["b".to_string()]),
        ]
    }

    #[test]
    fn efficacy_examples() {
        let e = tag_efficacy(&[toks("x a y")], &[toks("A B")], &lexicon()).unwrap();
        assert_eq!((e.precision, e.recall), (1.0, 0.5));
        assert!((e.f1 - 2.0 / 3.0).abs() < 1e-15);

        let e = tag_efficacy(
            &[toks("a"), toks("b z")],
            &[toks("A"), toks("B")],
            &lexicon(),
        )
        .unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));

        let e = tag_efficacy(&[toks("nothing here")], &[toks("A")], &lexicon()).unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (0.0, 0.0, 0.0));

        assert_eq!(
            tag_efficacy(&[toks("a")], &[toks("A")], &[]),
            Err(Error::EmptyLexicon)
        );
    }
}
