//! Structured-data instances, linearization, import/export and few-shot sampling.

mod e2e;
mod linearize;
mod sample;
pub mod synthetic;
mod vocab;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use e2e::{import_e2e_csv, parse_mr, read_e2e_csv};
pub use linearize::{linearize, linearize_mr, linearize_triples, DELIMITERS};
pub use sample::{sample_few_shot, FewShotSample, Shortfall};
pub use vocab::{Vocab, SPECIAL_TOKENS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        Self { subject: subject.into(), predicate: predicate.into(), object: object.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: String,
}

impl SlotValue {
    pub fn new(slot: &str, value: &str) -> Self {
        Self { slot: slot.into(), value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Payload {
    Triples(Vec<Triple>),
    Pairs(Vec<SlotValue>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// How instances are grouped for stratified sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Knowledge-graph category carried by the instance.
    Category,
    /// Number of slot-value pairs of an MR.
    SlotCount,
    /// Originating corpus carried by the instance.
    Source,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Scheme::Category),
            "slot_count" => Ok(Scheme::SlotCount),
            "source" => Ok(Scheme::Source),
            other => Err(Error::config(format!("unknown scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Category => "category",
            Scheme::SlotCount => "slot_count",
            Scheme::Source => "source",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct Instance {
    pub id: String,
    pub payload: Payload,
    pub stratum: String,
    pub references: Vec<String>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    id: String,
    payload_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triples: Option<Vec<Triple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<SlotValue>>,
    stratum: String,
    references: Vec<String>,
    split: Split,
}

impl TryFrom<RawInstance> for Instance {
    type Error = String;

    fn try_from(r: RawInstance) -> std::result::Result<Self, String> {
        let payload = match (r.payload_kind.as_str(), r.triples, r.pairs) {
            ("triples", Some(t), None) => Payload::Triples(t),
            ("pairs", None, Some(p)) => Payload::Pairs(p),
            (kind, _, _) => return Err(format!("instance {}: payload_kind {kind:?} does not match its fields", r.id)),
        };
        Ok(Instance { id: r.id, payload, stratum: r.stratum, references: r.references, split: r.split })
    }
}

impl From<Instance> for RawInstance {
    fn from(i: Instance) -> Self {
        let (kind, triples, pairs) = match i.payload {
            Payload::Triples(t) => ("triples", Some(t), None),
            Payload::Pairs(p) => ("pairs", None, Some(p)),
        };
        RawInstance {
            id: i.id,
            payload_kind: kind.into(),
            triples,
            pairs,
            stratum: i.stratum,
            references: i.references,
            split: i.split,
        }
    }
}

impl Instance {
    /// Checks the structural invariants, including the delimiter ban on fields.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Parse { position: format!("instance {}", self.id), detail };
        let check_field = |what: &str, v: &str, required: bool| -> Result<()> {
            if required && v.trim().is_empty() {
                return Err(bad(format!("empty {what}")));
            }
            if let Some(d) = DELIMITERS.iter().find(|d| v.contains(*d)) {
                return Err(bad(format!("{what} {v:?} contains the delimiter {d}")));
            }
            Ok(())
        };
        match &self.payload {
            Payload::Triples(ts) if ts.is_empty() => return Err(bad("empty triple list".into())),
            Payload::Pairs(ps) if ps.is_empty() => return Err(bad("empty pair list".into())),
            Payload::Triples(ts) => {
                for t in ts {
                    check_field("subject", &t.subject, true)?;
                    check_field("predicate", &t.predicate, true)?;
                    check_field("object", &t.object, false)?;
                }
            }
            Payload::Pairs(ps) => {
                for p in ps {
                    check_field("slot", &p.slot, true)?;
                    check_field("value", &p.value, false)?;
                }
            }
        }
        if self.references.is_empty() && self.split != Split::Test {
            return Err(bad("train/dev instance without references".into()));
        }
        Ok(())
    }

    pub fn source_text(&self) -> String {
        linearize(&self.payload).expect("validated payloads are non-empty")
    }
}

/// Stratum label of `instance` under `scheme`.
pub fn derive_stratum(instance: &Instance, scheme: Scheme) -> Result<String> {
    match (scheme, &instance.payload) {
        (Scheme::SlotCount, Payload::Pairs(p)) => Ok(p.len().to_string()),
        (Scheme::SlotCount, Payload::Triples(_)) => {
            Err(Error::contract(format!("instance {}: slot_count needs an MR payload", instance.id)))
        }
        (Scheme::Category | Scheme::Source, _) => Ok(instance.stratum.clone()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let d = Self { instances };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for i in &self.instances {
            i.validate()?;
            if !seen.insert(&i.id) {
                return Err(Error::Parse { position: format!("instance {}", i.id), detail: "duplicate id".into() });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s)
            .map_err(|e| Error::Parse { position: format!("line {}, column {}", e.line(), e.column()), detail: e.to_string() })?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("datasets serialize")
    }

    /// Reads the canonical JSON layout `{"instances": [...]}`.
    pub fn import_canonical_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn export_canonical_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Loads canonical JSON, or E2E CSV when the extension is `.csv` (as the train split).
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => import_e2e_csv(path, Split::Train),
            _ => Self::import_canonical_json(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mr(id: &str, n: usize) -> Instance {
        Instance {
            id: id.into(),
            payload: Payload::Pairs((0..n).map(|i| SlotValue::new(&format!("s{i}"), "v")).collect()),
            stratum: "x".into(),
            references: vec!["r".into()],
            split: Split::Train,
        }
    }

    #[test]
    fn strata_by_scheme() {
        let i = mr("a", 6);
        assert_eq!(derive_stratum(&i, Scheme::SlotCount).unwrap(), "6");
        let mut t = mr("b", 1);
        t.payload = Payload::Triples(vec![Triple::new("x", "y", "z")]);
        t.stratum = "Airport".into();
        assert_eq!(derive_stratum(&t, Scheme::Category).unwrap(), "Airport");
        t.stratum = "WikiSQL".into();
        assert_eq!(derive_stratum(&t, Scheme::Source).unwrap(), "WikiSQL");
        assert!(matches!(derive_stratum(&t, Scheme::SlotCount), Err(Error::Contract(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let d = Dataset::new(vec![mr("a", 2), mr("b", 3)]).unwrap();
        let back = Dataset::from_json_str(&d.to_json_string()).unwrap();
        assert_eq!(back, d);
        let mut bad = mr("c", 1);
        bad.payload = Payload::Pairs(vec![SlotValue::new("area", "x <V> y")]);
        assert!(Dataset::new(vec![bad]).is_err());
        assert!(matches!(Dataset::from_json_str("{\"instances\": [1]}"), Err(Error::Parse { .. })));
        assert!(Dataset::new(vec![mr("a", 1), mr("a", 2)]).is_err());
    }
}
