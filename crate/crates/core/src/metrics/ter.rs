use crate::error::{Error, Result};
use crate::metrics::{check_corpus, tokenize};

/// Upper bound on block shifts per segment.
pub const MAX_SHIFTS: usize = 50;
const MAX_SHIFT_LEN: usize = 10;

fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `hyp[start..start+len]` so that it begins at `dest` in the result.
fn shifted(hyp: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
    let dest = dest.min(rest.len());
    let tail = rest.split_off(dest);
    rest.extend_from_slice(&hyp[start..start + len]);
    rest.extend(tail);
    rest
}

/// Edits (shifts plus insertions, deletions, substitutions) turning `hyp` into `reference`.
/// Shifts are chosen greedily: each applied shift is the one that lowers the
/// edit distance most, and only phrases that occur in the reference move.
pub fn ter_edits(hyp: &[String], reference: &[String]) -> usize {
    let mut cur = hyp.to_vec();
    let mut dist = levenshtein(&cur, reference);
    let mut shifts = 0;
    while shifts < MAX_SHIFTS && dist > 0 {
        let mut best: Option<(usize, Vec<String>)> = None;
        for start in 0..cur.len() {
            for len in 1..=MAX_SHIFT_LEN.min(cur.len() - start) {
                let phrase = &cur[start..start + len];
                for j in 0..reference.len().saturating_sub(len - 1) {
                    if &reference[j..j + len] != phrase || j == start {
                        continue;
                    }
                    let cand = shifted(&cur, start, len, j);
                    let d = levenshtein(&cand, reference);
                    if d + 1 < dist && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((d, cand)) => {
                cur = cand;
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    shifts + dist
}

/// Translation edit rate: per segment the fewest edits over its references,
/// normalized by the total of average reference lengths.
pub fn ter(cands: &[String], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus("ter", cands, refs)?;
    let mut edits = 0.0;
    let mut length = 0.0;
    for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
        let ct = tokenize(c);
        let rt: Vec<Vec<String>> = rs.iter().map(|r| tokenize(r)).collect();
        if rt.iter().any(Vec::is_empty) {
            return Err(Error::contract(format!("ter: segment {i} has an empty reference")));
        }
        edits += rt.iter().map(|r| ter_edits(&ct, r)).min().expect("non-empty") as f64;
        length += rt.iter().map(Vec::len).sum::<usize>() as f64 / rt.len() as f64;
    }
    if length == 0.0 {
        return Ok(0.0);
    }
    Ok(edits / length)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(c: &str, r: &str) -> Result<f64> {
        ter(&[c.to_string()], &[vec![r.to_string()]])
    }

    #[test]
    fn hand_cases() {
        assert_eq!(one("a b c d", "a b c d").unwrap(), 0.0);
        assert_eq!(one("a b x d", "a b c d").unwrap(), 0.25);
        assert_eq!(one("", "a b c d").unwrap(), 1.0);
        assert!(one("a", "").is_err());
    }

    #[test]
    fn block_shift_costs_one() {
        let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
        // Moving "d e" to the front is one shift; plain edit distance would need 4.
        assert_eq!(ter_edits(&toks("a b c d e"), &toks("d e a b c")), 1);
    }
}
