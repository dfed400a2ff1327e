use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder-decoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDims {
    /// Embedding width.
    pub d_model: usize,
    /// FFN inner width.
    pub d_ff: usize,
    pub n_heads: usize,
    /// Per-head key/value width; `n_heads * d_kv` is the attention inner width.
    pub d_kv: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub rel_buckets: usize,
    pub max_rel_distance: usize,
    /// Longest encoder input (soft prompt included) the model accepts.
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

fn default_max_positions() -> usize {
    512
}

impl ArchitectureDims {
    /// Public T5-large configuration.
    pub fn t5_large() -> Self {
        Self {
            d_model: 1024,
            d_ff: 4096,
            n_heads: 16,
            d_kv: 64,
            n_enc_layers: 24,
            n_dec_layers: 24,
            vocab_size: 32128,
            rel_buckets: 32,
            max_rel_distance: 128,
            max_positions: 512,
        }
    }

    /// CPU-trainable preset; the vocabulary size comes from the corpus.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            d_kv: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size,
            rel_buckets: 32,
            max_rel_distance: 128,
            max_positions: 512,
        }
    }

    /// Smallest instantiation, used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            d_kv: 4,
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size: 12,
            rel_buckets: 8,
            max_rel_distance: 16,
            max_positions: 64,
        }
    }

    /// Resolves a preset name (`toy`, `tiny`, `t5-large`) or an inline JSON object.
    pub fn from_preset_or_json(spec: &str) -> Result<Self> {
        match spec.trim() {
            "t5-large" | "t5_large" => Ok(Self::t5_large()),
            "toy" => Ok(Self::toy(256)),
            "tiny" => Ok(Self::tiny()),
            other if other.starts_with('{') => {
                let d: Self = serde_json::from_str(other)?;
                d.validate()?;
                Ok(d)
            }
            other => Err(Error::config(format!("unknown dims preset {other:?}"))),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.d_kv
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("d_kv", self.d_kv),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("vocab_size", self.vocab_size),
            ("rel_buckets", self.rel_buckets),
            ("max_rel_distance", self.max_rel_distance),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("dimension {name} must be >= 1")));
        }
        if self.rel_buckets < 4 {
            return Err(Error::config("rel_buckets must be >= 4"));
        }
        Ok(())
    }

    /// Closed-form parameter count of the backbone (tied embeddings, no biases).
    pub fn backbone_param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let inner = self.inner_dim() as u64;
        let ff = self.d_ff as u64;
        let attn = 3 * d * inner + inner * d;
        let ffn = 2 * d * ff;
        let enc_layer = attn + ffn + 2 * d;
        let dec_layer = 2 * attn + ffn + 3 * d;
        let rel = (self.rel_buckets * self.n_heads) as u64;
        self.vocab_size as u64 * d
            + self.n_enc_layers as u64 * enc_layer
            + self.n_dec_layers as u64 * dec_layer
            + 2 * rel
            + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t5_large_backbone_size() {
        assert_eq!(ArchitectureDims::t5_large().backbone_param_count(), 737_668_096);
    }

    #[test]
    fn presets_and_json_resolve() {
        assert_eq!(ArchitectureDims::from_preset_or_json("t5-large").unwrap().d_model, 1024);
        let json = serde_json::to_string(&ArchitectureDims::tiny()).unwrap();
        assert_eq!(ArchitectureDims::from_preset_or_json(&json).unwrap(), ArchitectureDims::tiny());
        assert!(ArchitectureDims::from_preset_or_json("huge").is_err());
        let mut zero = ArchitectureDims::tiny();
        zero.n_heads = 0;
        assert!(zero.validate().is_err());
    }
}
