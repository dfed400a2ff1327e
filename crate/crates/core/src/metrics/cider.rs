use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::metrics::{check_corpus, ngram_counts, tokenize};

/// Width of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

type Vector = HashMap<Vec<String>, f64>;

fn tfidf(toks: &[String], n: usize, df: &HashMap<Vec<String>, usize>, log_docs: f64) -> (Vector, f64) {
    let mut v = Vector::new();
    for (g, c) in ngram_counts(toks, n) {
        let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
        v.insert(g, c as f64 * (log_docs - d.ln()));
    }
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Per-segment CIDEr: mean over orders 1..`max_n` of the tf-idf cosine between
/// candidate and each reference, times a Gaussian penalty on the length
/// difference, averaged over references and scaled by 10.
pub fn cider_segments(cands: &[String], refs: &[Vec<String>], max_n: usize, sigma: f64) -> Result<Vec<f64>> {
    check_corpus("cider", cands, refs)?;
    let distinct: HashSet<&Vec<String>> = refs.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::contract("cider needs at least two distinct reference sets for document frequencies"));
    }
    let rtoks: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for rs in &rtoks {
        let mut in_doc = HashSet::new();
        for r in rs {
            for n in 1..=max_n {
                in_doc.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in in_doc {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (refs.len() as f64).ln();
    let mut out = Vec::with_capacity(cands.len());
    for (c, rs) in cands.iter().zip(&rtoks) {
        let ct = tokenize(c);
        let mut seg = 0.0;
        for r in rs {
            let delta = ct.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            let mut sim = 0.0;
            for n in 1..=max_n {
                let (vc, nc) = tfidf(&ct, n, &df, log_docs);
                let (vr, nr) = tfidf(r, n, &df, log_docs);
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                    sim += dot / (nc * nr);
                }
            }
            seg += sim / max_n as f64 * penalty;
        }
        out.push(10.0 * seg / rs.len() as f64);
    }
    Ok(out)
}

pub fn cider(cands: &[String], refs: &[Vec<String>], max_n: usize, sigma: f64) -> Result<f64> {
    let s = cider_segments(cands, refs, max_n, sigma)?;
    Ok(if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> (Vec<String>, Vec<Vec<String>>) {
        let c = vec!["a b c d e".to_string(), "v w x y z".to_string()];
        let r = vec![vec!["a b c d e".to_string()], vec!["p q r s".to_string()]];
        (c, r)
    }

    #[test]
    fn identity_scores_ten_and_disjoint_zero() {
        let (c, r) = corpus();
        let s = cider_segments(&c, &r, 4, CIDER_SIGMA).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-9);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn sigma_only_moves_penalty() {
        let (c, r) = corpus();
        let a = cider_segments(&c, &r, 4, 1.0).unwrap();
        assert!((a[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn single_document_is_rejected() {
        let c = vec!["a".to_string(), "b".to_string()];
        let r = vec![vec!["a".to_string()], vec!["a".to_string()]];
        assert!(matches!(cider(&c, &r, 4, CIDER_SIGMA), Err(Error::Contract(_))));
    }
}
