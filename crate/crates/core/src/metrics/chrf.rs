use crate::error::Result;
use crate::metrics::{check_corpus, ngram_counts, tokenize};

const CHAR_ORDER: usize = 6;
const WORD_ORDER: usize = 2;
const BETA: f64 = 2.0;

/// `(candidate count, reference count, matches)` of order-`n` n-grams.
/// Character n-grams ignore whitespace.
pub fn ngram_stats(cand: &str, reference: &str, n: usize, chars: bool) -> (usize, usize, usize) {
    if chars {
        let f = |s: &str| tokenize(s).concat().chars().collect::<Vec<char>>();
        counts(&f(cand), &f(reference), n)
    } else {
        counts(&tokenize(cand), &tokenize(reference), n)
    }
}

fn counts<T: Eq + std::hash::Hash + Clone>(c: &[T], r: &[T], n: usize) -> (usize, usize, usize) {
    let cc = ngram_counts(c, n);
    let rc = ngram_counts(r, n);
    let m = cc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum();
    (cc.values().sum(), rc.values().sum(), m)
}

/// Statistics for all orders: character orders first, then word orders.
fn segment_stats(cand: &str, reference: &str) -> Vec<(usize, usize, usize)> {
    let cc: Vec<char> = tokenize(cand).concat().chars().collect();
    let rc: Vec<char> = tokenize(reference).concat().chars().collect();
    let cw = tokenize(cand);
    let rw = tokenize(reference);
    (1..=CHAR_ORDER)
        .map(|n| counts(&cc, &rc, n))
        .chain((1..=WORD_ORDER).map(|n| counts(&cw, &rw, n)))
        .collect()
}

/// Averages precision and recall over orders present on both sides, then F-beta.
fn f_score(stats: &[(usize, usize, usize)]) -> f64 {
    let mut p = 0.0;
    let mut r = 0.0;
    let mut eff = 0;
    for &(h, rf, m) in stats {
        if h > 0 && rf > 0 {
            p += m as f64 / h as f64;
            r += m as f64 / rf as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return 0.0;
    }
    p /= eff as f64;
    r /= eff as f64;
    let b2 = BETA * BETA;
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * p * r / (b2 * p + r)
    }
}

/// chrF++ (character orders 1..6, word orders 1..2, beta 2). Statistics are
/// pooled over the corpus, using each segment's best-scoring reference.
pub fn chrf_pp(cands: &[String], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus("chrF++", cands, refs)?;
    let mut total = vec![(0usize, 0usize, 0usize); CHAR_ORDER + WORD_ORDER];
    for (c, rs) in cands.iter().zip(refs) {
        let best = rs
            .iter()
            .map(|r| segment_stats(c, r))
            .max_by(|a, b| f_score(a).total_cmp(&f_score(b)))
            .expect("reference sets are non-empty");
        for (t, s) in total.iter_mut().zip(best) {
            t.0 += s.0;
            t.1 += s.1;
            t.2 += s.2;
        }
    }
    Ok(f_score(&total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(c: &str, r: &str) -> f64 {
        chrf_pp(&[c.to_string()], &[vec![r.to_string()]]).unwrap()
    }

    #[test]
    fn identity_and_disjoint() {
        assert!((one("the cat sat", "the cat sat") - 100.0).abs() < 1e-9);
        assert_eq!(one("abc", "xyz"), 0.0);
    }

    #[test]
    fn bigram_overlap() {
        let (h, r, m) = ngram_stats("abcd", "abce", 2, true);
        assert_eq!((h, r, m), (3, 3, 2));
    }
}
