use std::collections::HashMap;

use crate::error::Result;
use crate::metrics::{check_corpus, ngram_counts, tokenize};

/// Corpus-pooled clipped n-gram matches and candidate n-gram total for order `n`.
/// Clipping uses the maximum count of each n-gram over a segment's references.
pub fn modified_precision(cands: &[String], refs: &[Vec<String>], n: usize) -> Result<(usize, usize)> {
    check_corpus("bleu", cands, refs)?;
    let mut matched = 0;
    let mut total = 0;
    for (c, rs) in cands.iter().zip(refs) {
        let (m, t) = segment_counts(&tokenize(c), &rs.iter().map(|r| tokenize(r)).collect::<Vec<_>>(), n);
        matched += m;
        total += t;
    }
    Ok((matched, total))
}

fn segment_counts(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let cc = ngram_counts(cand, n);
    let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cc.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cc.values().sum())
}

fn bleu(cands: &[String], refs: &[Vec<String>], max_n: usize, smooth: bool) -> Result<f64> {
    check_corpus("bleu", cands, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, rs) in cands.iter().zip(refs) {
        let ct = tokenize(c);
        let rt: Vec<Vec<String>> = rs.iter().map(|r| tokenize(r)).collect();
        cand_len += ct.len();
        // Closest reference length; ties go to the shorter one.
        ref_len += rt
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(ct.len()), l))
            .expect("reference sets are non-empty");
        for n in 1..=max_n {
            let (m, t) = segment_counts(&ct, &rt, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if smooth && n > 0 { (matched[n] + 1, totals[n] + 1) } else { (matched[n], totals[n]) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Standard corpus BLEU on a 0..100 scale, unsmoothed.
pub fn corpus_bleu(cands: &[String], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    bleu(cands, refs, max_n, false)
}

/// Corpus BLEU with add-one smoothing on orders 2 and above, for small dev sets.
pub fn corpus_bleu_smoothed(cands: &[String], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    bleu(cands, refs, max_n, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn identity_and_degenerate() {
        let c = vec![s("the cat sat on the mat")];
        let r = vec![vec![s("the cat sat on the mat")]];
        assert!((corpus_bleu(&c, &r, 4).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&[s("")], &r, 4).unwrap(), 0.0);
        assert!(corpus_bleu(&c, &[], 4).is_err());
    }

    #[test]
    fn clipped_unigrams() {
        let (m, t) = modified_precision(&[s("the the the the")], &[vec![s("the cat")]], 1).unwrap();
        assert_eq!((m, t), (1, 4));
    }

    #[test]
    fn brevity_penalty() {
        // 4-token candidate against an 8-token reference, all n-grams matched.
        let c = vec![s("a b c d")];
        let r = vec![vec![s("a b c d e f g h")]];
        let got = corpus_bleu(&c, &r, 4).unwrap();
        assert!((got - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }
}
