use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::Scheme;
use crate::error::{Error, Result};
use crate::peft::PeftConfig;

/// Per-stratum shot count, or the whole train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    All,
    PerStratum(usize),
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::All => s.serialize_str("all"),
            Shots::PerStratum(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Shots::PerStratum(n)),
            Raw::S(s) if s == "all" => Ok(Shots::All),
            Raw::S(s) => s.parse().map(Shots::PerStratum).map_err(|_| serde::de::Error::custom(format!("shots: expected a count or \"all\", got {s:?}"))),
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::All => f.write_str("all"),
            Shots::PerStratum(n) => write!(f, "{n}"),
        }
    }
}

fn three() -> usize {
    3
}
fn max_steps() -> usize {
    2000
}
fn batch() -> usize {
    8
}
fn eval_every() -> usize {
    50
}
fn dev_cap() -> usize {
    200
}
fn decode_len() -> usize {
    64
}
fn toy() -> String {
    "toy".to_string()
}

/// One experiment cell. Every field except the dataset and method has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Canonical JSON dataset or E2E csv.
    pub dataset: PathBuf,
    pub scheme: Scheme,
    pub shots: Shots,
    #[serde(default = "three")]
    pub sampling_reps: usize,
    #[serde(default = "three")]
    pub seeds: usize,
    pub peft: PeftConfig,
    /// Falls back to the method's default rate when absent.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "max_steps")]
    pub max_steps: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "eval_every")]
    pub eval_every: usize,
    #[serde(default = "dev_cap")]
    pub dev_cap: usize,
    /// Test instances scored after training; all of them when absent.
    #[serde(default)]
    pub test_cap: Option<usize>,
    /// Model preset name (`toy`, `tiny`, `t5_large`) or inline dims JSON; the vocabulary size is overridden.
    #[serde(default = "toy")]
    pub model: String,
    /// Seed of the randomly initialized backbone, used when no backbone checkpoint is given.
    #[serde(default)]
    pub backbone_seed: u64,
    /// Fine-tuned checkpoint supplying the backbone weights.
    #[serde(default)]
    pub backbone: Option<PathBuf>,
    /// Training stops once dev BLEU reaches this value.
    #[serde(default)]
    pub target_dev_bleu: Option<f64>,
    #[serde(default = "decode_len")]
    pub max_decode_len: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Spec with default protocol settings.
    pub fn new(dataset: impl Into<PathBuf>, scheme: Scheme, shots: Shots, peft: PeftConfig) -> Self {
        Self {
            dataset: dataset.into(),
            scheme,
            shots,
            sampling_reps: 3,
            seeds: 3,
            peft,
            learning_rate: None,
            max_steps: max_steps(),
            batch_size: batch(),
            eval_every: eval_every(),
            dev_cap: dev_cap(),
            test_cap: None,
            model: toy(),
            backbone_seed: 0,
            backbone: None,
            target_dev_bleu: None,
            max_decode_len: decode_len(),
            output_dir: None,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Parse {
            position: format!("line {} column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_reps == 0 || self.seeds == 0 {
            return Err(Error::config("sampling_reps and seeds must be at least 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_decode_len == 0 {
            return Err(Error::config("batch_size, eval_every and max_decode_len must be at least 1"));
        }
        if self.shots == Shots::PerStratum(0) {
            return Err(Error::config("shots must be at least 1"));
        }
        Ok(())
    }

    /// Configured rate, else the method default (the DART rate for source-stratified data).
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.peft.default_learning_rate(self.scheme == Scheme::Source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_takes_defaults() {
        let s = ExperimentSpec::from_json_str(
            r#"{"dataset":"d.json","scheme":"slot_count","shots":8,"peft":{"method":"PromptTuning","k":50}}"#,
        )
        .unwrap();
        assert_eq!((s.sampling_reps, s.seeds, s.batch_size, s.eval_every, s.dev_cap, s.max_steps), (3, 3, 8, 50, 200, 2000));
        assert_eq!(s.shots, Shots::PerStratum(8));
        assert_eq!(s.effective_learning_rate(), 0.5);
        let back = ExperimentSpec::from_json_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_values() {
        let base = r#""dataset":"d.json","scheme":"category","peft":{"method":"FineTune"}"#;
        assert!(ExperimentSpec::from_json_str(&format!(r#"{{{base},"shots":"all","seeds":0}}"#)).is_err());
        assert!(ExperimentSpec::from_json_str(&format!(r#"{{{base},"shots":"all","learning_rate":-1.0}}"#)).is_err());
        assert!(ExperimentSpec::from_json_str(&format!(r#"{{{base},"shots":"some"}}"#)).is_err());
        let all = ExperimentSpec::from_json_str(&format!(r#"{{{base},"shots":"all"}}"#)).unwrap();
        assert_eq!(all.shots, Shots::All);
    }
}
