use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchitectureDims;
use crate::peft::hooks::{Projection, ScaleShape};

/// Which attention modules receive prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixPlacement {
    /// Encoder self, decoder self and decoder cross attention.
    #[default]
    AllAttention,
    EncoderOnly,
    /// Encoder self and decoder self attention.
    EncAndDecSelf,
}

fn vector() -> ScaleShape {
    ScaleShape::Vector
}

fn query_value() -> Vec<Projection> {
    vec![Projection::Query, Projection::Value]
}

fn one_f64() -> f64 {
    1.0
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn enc_and_dec_self() -> PrefixPlacement {
    PrefixPlacement::EncAndDecSelf
}

/// A tuning method and its hyperparameters, tagged by `"method"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum PeftConfig {
    FineTune,
    PromptTuning {
        k: usize,
    },
    ScaledPromptTuning {
        k: usize,
        #[serde(default = "vector")]
        scale_shape: ScaleShape,
    },
    PrefixTuning {
        len: usize,
        #[serde(default)]
        placement: PrefixPlacement,
    },
    LoRA {
        rank: usize,
        #[serde(default = "query_value")]
        targets: Vec<Projection>,
        #[serde(default = "one_f64")]
        scaling: f64,
    },
    BottleneckAdapter {
        reduction: usize,
    },
    Compacter {
        phm_n: usize,
        reduction: usize,
        #[serde(default = "one")]
        factor_rank: usize,
        #[serde(default = "yes")]
        share_slow: bool,
    },
    IA3,
    UniPELT {
        adapter_reduction: usize,
        lora_rank: usize,
        prefix_len: usize,
        #[serde(default = "enc_and_dec_self")]
        prefix_placement: PrefixPlacement,
    },
}

impl PeftConfig {
    pub fn prompt_tuning(k: usize) -> Self {
        PeftConfig::PromptTuning { k }
    }

    pub fn scaled_prompt_tuning(k: usize) -> Self {
        PeftConfig::ScaledPromptTuning { k, scale_shape: ScaleShape::Vector }
    }

    pub fn prefix_tuning(len: usize) -> Self {
        PeftConfig::PrefixTuning { len, placement: PrefixPlacement::AllAttention }
    }

    pub fn lora(rank: usize) -> Self {
        PeftConfig::LoRA { rank, targets: query_value(), scaling: 1.0 }
    }

    pub fn adapter(reduction: usize) -> Self {
        PeftConfig::BottleneckAdapter { reduction }
    }

    pub fn compacter(phm_n: usize, reduction: usize) -> Self {
        PeftConfig::Compacter { phm_n, reduction, factor_rank: 1, share_slow: true }
    }

    pub fn unipelt(adapter_reduction: usize, lora_rank: usize, prefix_len: usize) -> Self {
        PeftConfig::UniPELT { adapter_reduction, lora_rank, prefix_len, prefix_placement: enc_and_dec_self() }
    }

    /// Short method label, e.g. `SPT`.
    pub fn label(&self) -> &'static str {
        match self {
            PeftConfig::FineTune => "Fine-Tuning",
            PeftConfig::PromptTuning { .. } => "Prompt-Tuning",
            PeftConfig::ScaledPromptTuning { .. } => "SPT",
            PeftConfig::PrefixTuning { .. } => "Prefix-Tuning",
            PeftConfig::LoRA { .. } => "LoRA",
            PeftConfig::BottleneckAdapter { .. } => "Adapter",
            PeftConfig::Compacter { .. } => "Compacter",
            PeftConfig::IA3 => "IA3",
            PeftConfig::UniPELT { .. } => "UniPELT",
        }
    }

    /// Published learning rate; `dart` selects the second value where two exist.
    pub fn default_learning_rate(&self, dart: bool) -> f64 {
        match self {
            PeftConfig::FineTune | PeftConfig::BottleneckAdapter { .. } => 1e-4,
            PeftConfig::PromptTuning { .. } | PeftConfig::ScaledPromptTuning { .. } => 5e-1,
            PeftConfig::LoRA { .. } => {
                if dart {
                    5e-4
                } else {
                    1e-4
                }
            }
            PeftConfig::Compacter { .. } | PeftConfig::IA3 => 3e-3,
            PeftConfig::PrefixTuning { .. } => {
                if dart {
                    1e-1
                } else {
                    5e-2
                }
            }
            PeftConfig::UniPELT { .. } => {
                if dart {
                    1e-3
                } else {
                    1e-4
                }
            }
        }
    }

    /// Checks numeric fields and divisibility against `dims`.
    pub fn validate(&self, dims: &ArchitectureDims) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{}: {name} must be >= 1", self.label())))
            } else {
                Ok(())
            }
        };
        let bottleneck = |r: usize| -> Result<usize> {
            positive("reduction", r)?;
            if dims.d_model % r != 0 {
                return Err(Error::config(format!(
                    "{}: reduction {r} does not divide d_model {}",
                    self.label(),
                    dims.d_model
                )));
            }
            Ok(dims.d_model / r)
        };
        match self {
            PeftConfig::FineTune | PeftConfig::IA3 => {}
            PeftConfig::PromptTuning { k } | PeftConfig::ScaledPromptTuning { k, .. } => {
                positive("k", *k)?;
                if *k >= dims.max_positions {
                    return Err(Error::config(format!(
                        "prompt length {k} leaves no room for input tokens (capacity {})",
                        dims.max_positions
                    )));
                }
            }
            PeftConfig::PrefixTuning { len, .. } => positive("len", *len)?,
            PeftConfig::LoRA { rank, targets, scaling } => {
                positive("rank", *rank)?;
                if targets.is_empty() {
                    return Err(Error::config("LoRA: no target projections"));
                }
                let mut t = targets.clone();
                t.sort();
                t.dedup();
                if t.len() != targets.len() {
                    return Err(Error::config("LoRA: duplicate target projection"));
                }
                if !scaling.is_finite() {
                    return Err(Error::config("LoRA: scaling must be finite"));
                }
            }
            PeftConfig::BottleneckAdapter { reduction } => {
                bottleneck(*reduction)?;
            }
            PeftConfig::Compacter { phm_n, reduction, factor_rank, .. } => {
                positive("phm_n", *phm_n)?;
                positive("factor_rank", *factor_rank)?;
                let b = bottleneck(*reduction)?;
                if dims.d_model % phm_n != 0 || b % phm_n != 0 {
                    return Err(Error::config(format!(
                        "Compacter: phm_n {phm_n} must divide d_model {} and bottleneck width {b}",
                        dims.d_model
                    )));
                }
            }
            PeftConfig::UniPELT { adapter_reduction, lora_rank, prefix_len, .. } => {
                bottleneck(*adapter_reduction)?;
                positive("lora_rank", *lora_rank)?;
                positive("prefix_len", *prefix_len)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for PeftConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeftConfig::FineTune => write!(f, "-"),
            PeftConfig::PromptTuning { k } => write!(f, "prompt length {k}"),
            PeftConfig::ScaledPromptTuning { k, scale_shape } => write!(f, "prompt length {k}, {scale_shape:?} scale"),
            PeftConfig::PrefixTuning { len, placement } => write!(f, "prefix length {len}, {placement:?}"),
            PeftConfig::LoRA { rank, .. } => write!(f, "rank {rank}"),
            PeftConfig::BottleneckAdapter { reduction } => write!(f, "r {reduction}"),
            PeftConfig::Compacter { phm_n, reduction, .. } => write!(f, "PHM dim {phm_n}, r {reduction}"),
            PeftConfig::IA3 => write!(f, "rank 1"),
            PeftConfig::UniPELT { adapter_reduction, lora_rank, prefix_len, .. } => {
                write!(f, "rank {lora_rank}, r {adapter_reduction}, prefix length {prefix_len}")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_tags_and_defaults() {
        let c: PeftConfig = serde_json::from_str(r#"{"method":"ScaledPromptTuning","k":50}"#).unwrap();
        assert_eq!(c, PeftConfig::scaled_prompt_tuning(50));
        let c: PeftConfig = serde_json::from_str(r#"{"method":"LoRA","rank":8}"#).unwrap();
        assert_eq!(c, PeftConfig::lora(8));
        let c: PeftConfig = serde_json::from_str(r#"{"method":"IA3"}"#).unwrap();
        assert_eq!(c, PeftConfig::IA3);
        for c in [PeftConfig::FineTune, PeftConfig::compacter(8, 16), PeftConfig::unipelt(16, 8, 5)] {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<PeftConfig>(&s).unwrap(), c);
        }
    }

    #[test]
    fn validation() {
        let dims = ArchitectureDims::toy(50);
        assert!(PeftConfig::adapter(3).validate(&dims).is_err());
        assert!(PeftConfig::adapter(16).validate(&dims).is_ok());
        assert!(PeftConfig::prompt_tuning(0).validate(&dims).is_err());
        assert!(PeftConfig::prompt_tuning(512).validate(&dims).is_err());
        assert!(PeftConfig::compacter(3, 16).validate(&dims).is_err());
        assert!(PeftConfig::compacter(4, 16).validate(&dims).is_ok());
    }
}
