use crate::error::Result;
use crate::metrics::{check_corpus, tokenize};

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure in `[0, 1]`: per segment, the best precision and best
/// recall over its references combine into one F score; the corpus score is
/// the segment mean.
pub fn rouge_l(cands: &[String], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus("rouge_l", cands, refs)?;
    if cands.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let ct = tokenize(c);
        let mut p_max: f64 = 0.0;
        let mut r_max: f64 = 0.0;
        for r in rs {
            let rt = tokenize(r);
            let l = lcs_len(&ct, &rt) as f64;
            if !ct.is_empty() {
                p_max = p_max.max(l / ct.len() as f64);
            }
            if !rt.is_empty() {
                r_max = r_max.max(l / rt.len() as f64);
            }
        }
        if p_max > 0.0 && r_max > 0.0 {
            sum += (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max);
        }
    }
    Ok(sum / cands.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(c: &str, r: &str) -> f64 {
        rouge_l(&[c.to_string()], &[vec![r.to_string()]]).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "d", "e"]), 3);
        assert!((one("a b c d", "a c d e") - 0.75).abs() < 1e-12);
        assert!((one("a b c", "a b c") - 1.0).abs() < 1e-12);
        assert_eq!(one("a b", "c d"), 0.0);
    }
}
