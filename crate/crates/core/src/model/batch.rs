use crate::error::{Error, Result};

/// Reserved token ids shared by the model and the vocabulary.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Padded id matrices for one teacher-forced step.
///
/// Decoder inputs are the targets shifted right behind the begin id; targets
/// end with the end id. Masks are `true` on real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub enc_ids: Vec<Vec<usize>>,
    pub enc_mask: Vec<Vec<bool>>,
    pub dec_input: Vec<Vec<usize>>,
    pub dec_target: Vec<Vec<usize>>,
    pub dec_mask: Vec<Vec<bool>>,
}

/// One unpadded example extracted from a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub enc: Vec<usize>,
    pub dec_input: Vec<usize>,
    pub dec_target: Vec<usize>,
}

impl TokenBatch {
    /// Builds a batch from `(encoder ids, reference ids)` pairs.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let enc_len = pairs.iter().map(|(e, _)| e.len()).max().unwrap_or(0);
        let dec_len = pairs.iter().map(|(_, d)| d.len() + 1).max().unwrap_or(0);
        let pad = |v: &[usize], n: usize| -> (Vec<usize>, Vec<bool>) {
            let mut ids = v.to_vec();
            let mut mask = vec![true; v.len()];
            ids.resize(n, PAD_ID);
            mask.resize(n, false);
            (ids, mask)
        };
        let mut b = TokenBatch {
            enc_ids: Vec::new(),
            enc_mask: Vec::new(),
            dec_input: Vec::new(),
            dec_target: Vec::new(),
            dec_mask: Vec::new(),
        };
        for (enc, refr) in pairs {
            let (e, em) = pad(enc, enc_len);
            let mut din = vec![BOS_ID];
            din.extend_from_slice(refr);
            let mut dt = refr.clone();
            dt.push(EOS_ID);
            let (di, dm) = pad(&din, dec_len);
            let (dt, _) = pad(&dt, dec_len);
            b.enc_ids.push(e);
            b.enc_mask.push(em);
            b.dec_input.push(di);
            b.dec_target.push(dt);
            b.dec_mask.push(dm);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.enc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc_ids.is_empty()
    }

    /// Appends `enc_extra` / `dec_extra` padding columns to every row.
    pub fn with_extra_padding(&self, enc_extra: usize, dec_extra: usize) -> Self {
        let mut b = self.clone();
        for i in 0..b.len() {
            b.enc_ids[i].extend(std::iter::repeat_n(PAD_ID, enc_extra));
            b.enc_mask[i].extend(std::iter::repeat_n(false, enc_extra));
            b.dec_input[i].extend(std::iter::repeat_n(PAD_ID, dec_extra));
            b.dec_target[i].extend(std::iter::repeat_n(PAD_ID, dec_extra));
            b.dec_mask[i].extend(std::iter::repeat_n(false, dec_extra));
        }
        b
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let n = self.len();
        if [self.enc_mask.len(), self.dec_input.len(), self.dec_target.len(), self.dec_mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::shape("token_batch", "row counts of ids and masks differ"));
        }
        for i in 0..n {
            if self.enc_ids[i].len() != self.enc_mask[i].len()
                || self.dec_input[i].len() != self.dec_mask[i].len()
                || self.dec_target[i].len() != self.dec_mask[i].len()
            {
                return Err(Error::shape("token_batch", format!("row {i}: ids and mask lengths differ")));
            }
            let all = self.enc_ids[i].iter().chain(&self.dec_input[i]).chain(&self.dec_target[i]);
            if let Some(bad) = all.copied().find(|&id| id >= vocab_size) {
                return Err(Error::Index { op: "token_batch", detail: format!("id {bad} >= vocab {vocab_size}") });
            }
        }
        Ok(())
    }

    /// Non-padding tokens of row `i`.
    pub fn example(&self, i: usize) -> Example {
        let pick = |ids: &[usize], mask: &[bool]| ids.iter().zip(mask).filter(|(_, m)| **m).map(|(id, _)| *id).collect();
        Example {
            enc: pick(&self.enc_ids[i], &self.enc_mask[i]),
            dec_input: pick(&self.dec_input[i], &self.dec_mask[i]),
            dec_target: pick(&self.dec_target[i], &self.dec_mask[i]),
        }
    }

    pub fn max_dec_len(&self) -> usize {
        self.dec_input.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_targets_behind_begin_id() {
        let b = TokenBatch::from_pairs(&[(vec![5, 6, 7], vec![8, 9]), (vec![5], vec![10])]);
        assert_eq!(b.dec_input[0], vec![BOS_ID, 8, 9]);
        assert_eq!(b.dec_target[0], vec![8, 9, EOS_ID]);
        assert_eq!(b.dec_input[1], vec![BOS_ID, 10, PAD_ID]);
        assert_eq!(b.enc_mask[1], vec![true, false, false]);
        assert_eq!(b.example(1).enc, vec![5]);
        assert_eq!(b.example(1).dec_target, vec![10, EOS_ID]);
        b.validate(11).unwrap();
        assert!(b.validate(10).is_err());
    }
}
