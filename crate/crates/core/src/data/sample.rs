use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_stratum, Dataset, Instance, Scheme, Split};
use crate::error::{Error, Result};

/// A stratum holding fewer train instances than requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub stratum: String,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSample {
    /// Sorted by `(stratum, id)`.
    pub instances: Vec<Instance>,
    pub shortfalls: Vec<Shortfall>,
}

impl FewShotSample {
    pub fn per_stratum(&self, scheme: Scheme) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for i in &self.instances {
            *m.entry(derive_stratum(i, scheme).expect("sampled under this scheme")).or_insert(0) += 1;
        }
        m
    }
}

/// Draws `min(n, size)` train instances uniformly without replacement from every stratum.
pub fn sample_few_shot(dataset: &Dataset, scheme: Scheme, n: usize, seed: u64) -> Result<FewShotSample> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::contract("few-shot sampling from a dataset without train instances"));
    }
    let mut strata: BTreeMap<String, Vec<&Instance>> = BTreeMap::new();
    for inst in train {
        strata.entry(derive_stratum(inst, scheme)?).or_default().push(inst);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut shortfalls = Vec::new();
    for (stratum, mut members) in strata {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let take = n.min(members.len());
        if take < n {
            shortfalls.push(Shortfall { stratum: stratum.clone(), requested: n, available: members.len() });
        }
        let mut picked: Vec<Instance> = sample(&mut rng, members.len(), take).into_iter().map(|i| members[i].clone()).collect();
        picked.sort_by(|a, b| a.id.cmp(&b.id));
        out.extend(picked);
    }
    Ok(FewShotSample { instances: out, shortfalls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Payload, SlotValue};

    fn fixture(strata: usize, per: usize) -> Dataset {
        let mut v = Vec::new();
        for s in 0..strata {
            for i in 0..per {
                v.push(Instance {
                    id: format!("{s:02}-{i:03}"),
                    payload: Payload::Pairs(vec![SlotValue::new("a", "b")]),
                    stratum: format!("cat{s:02}"),
                    references: vec!["x".into()],
                    split: Split::Train,
                });
            }
        }
        Dataset::new(v).unwrap()
    }

    #[test]
    fn exact_stratification() {
        let s = sample_few_shot(&fixture(16, 20), Scheme::Category, 8, 1).unwrap();
        assert_eq!(s.instances.len(), 128);
        assert!(s.per_stratum(Scheme::Category).values().all(|&c| c == 8));
        assert!(s.shortfalls.is_empty());
        let s2 = sample_few_shot(&fixture(16, 20), Scheme::Category, 8, 1).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn shortfall_takes_everything() {
        let s = sample_few_shot(&fixture(2, 3), Scheme::Category, 5, 0).unwrap();
        assert_eq!(s.instances.len(), 6);
        assert_eq!(s.shortfalls.len(), 2);
        assert!(sample_few_shot(&Dataset::default(), Scheme::Category, 5, 0).is_err());
    }
}
