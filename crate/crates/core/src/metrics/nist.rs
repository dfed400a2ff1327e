use std::collections::HashMap;

use crate::error::Result;
use crate::metrics::{check_corpus, ngram_counts, tokenize};

/// NIST score: clipped n-gram matches weighted by information gain
/// `log2(count(prefix) / count(ngram))` over the reference corpus, times a
/// brevity factor that is 0.5 when the candidate is 2/3 of the reference length.
pub fn nist(cands: &[String], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_corpus("nist", cands, refs)?;
    let ctoks: Vec<Vec<String>> = cands.iter().map(|c| tokenize(c)).collect();
    let rtoks: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();

    let mut ref_counts: HashMap<Vec<String>, usize> = HashMap::new();
    let mut ref_words = 0usize;
    for rs in &rtoks {
        for r in rs {
            ref_words += r.len();
            for n in 1..=max_n {
                for (g, c) in ngram_counts(r, n) {
                    *ref_counts.entry(g).or_insert(0) += c;
                }
            }
        }
    }
    let info = |g: &[String]| -> f64 {
        let count = ref_counts.get(g).copied().unwrap_or(0);
        if count == 0 {
            return 0.0;
        }
        let prefix = if g.len() == 1 { ref_words } else { ref_counts.get(&g[..g.len() - 1]).copied().unwrap_or(0) };
        (prefix as f64 / count as f64).log2()
    };

    let mut info_sum = vec![0.0; max_n];
    let mut totals = vec![0usize; max_n];
    let mut sys_len = 0usize;
    let mut ref_len = 0.0;
    for (c, rs) in ctoks.iter().zip(&rtoks) {
        sys_len += c.len();
        ref_len += rs.iter().map(Vec::len).sum::<usize>() as f64 / rs.len() as f64;
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
            for r in rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                let m = (*k).min(max_ref.get(g).copied().unwrap_or(0));
                if m > 0 {
                    info_sum[n - 1] += m as f64 * info(g);
                }
            }
            totals[n - 1] += cc.values().sum::<usize>();
        }
    }
    if sys_len == 0 {
        return Ok(0.0);
    }
    let score: f64 = (0..max_n).filter(|&n| totals[n] > 0).map(|n| info_sum[n] / totals[n] as f64).sum();
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let ratio = (sys_len as f64 / ref_len).min(1.0);
    let bp = (beta * ratio.ln().powi(2)).exp();
    Ok(score * bp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_single_segment() {
        let got = nist(&["a b c".to_string()], &[vec!["a b c".to_string()]], 5).unwrap();
        // Unigrams carry log2(3/1) each; longer n-grams are fully predictable.
        assert!((got - 3f64.log2()).abs() < 1e-12);
        assert_eq!(nist(&[String::new()], &[vec!["a b".to_string()]], 5).unwrap(), 0.0);
    }

    #[test]
    fn brevity_halves_at_two_thirds() {
        let c = vec!["a b".to_string()];
        let r = vec![vec!["a b c".to_string()]];
        let full = 2.0 * 3f64.log2() / 2.0;
        assert!((nist(&c, &r, 1).unwrap() - 0.5 * full).abs() < 1e-12);
    }
}
