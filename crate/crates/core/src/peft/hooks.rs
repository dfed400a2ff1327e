//! Attachment points of the backbone and the hooks a method installs there.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchitectureDims;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Where a hook runs inside the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttachPoint {
    /// Token embeddings of the encoder input, before the first layer.
    EncoderInput,
    /// Hidden state entering a layer (used by gates).
    LayerInput { stack: Stack, layer: usize },
    /// Query/key/value streams of one attention module.
    Attention { stack: Stack, layer: usize, kind: AttentionKind },
    /// FFN inner activation, after the nonlinearity.
    FfnInner { stack: Stack, layer: usize },
    /// FFN sublayer output, before the residual add.
    FfnOutput { stack: Stack, layer: usize },
}

impl AttachPoint {
    pub fn validate(&self, dims: &ArchitectureDims) -> Result<()> {
        let layers = |s: Stack| match s {
            Stack::Encoder => dims.n_enc_layers,
            Stack::Decoder => dims.n_dec_layers,
        };
        let (stack, layer) = match *self {
            AttachPoint::EncoderInput => return Ok(()),
            AttachPoint::Attention { stack: Stack::Encoder, kind: AttentionKind::CrossAttention, .. } => {
                return Err(Error::config(format!("{self}: the encoder has no cross-attention")))
            }
            AttachPoint::LayerInput { stack, layer }
            | AttachPoint::Attention { stack, layer, .. }
            | AttachPoint::FfnInner { stack, layer }
            | AttachPoint::FfnOutput { stack, layer } => (stack, layer),
        };
        if layer >= layers(stack) {
            return Err(Error::config(format!("{self}: layer {layer} does not exist ({} layers)", layers(stack))));
        }
        Ok(())
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |s: &Stack| match s {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        match self {
            AttachPoint::EncoderInput => write!(f, "encoder_input"),
            AttachPoint::LayerInput { stack, layer } => write!(f, "{}.{layer}.input", s(stack)),
            AttachPoint::Attention { stack, layer, kind } => {
                write!(f, "{}", attention_prefix(*stack, *layer, *kind))
            }
            AttachPoint::FfnInner { stack, layer } => write!(f, "{}.{layer}.ffn.inner", s(stack)),
            AttachPoint::FfnOutput { stack, layer } => write!(f, "{}.{layer}.ffn.output", s(stack)),
        }
    }
}

/// Backbone parameter prefix of an attention module, e.g. `dec.1.cross_attn`.
pub fn attention_prefix(stack: Stack, layer: usize, kind: AttentionKind) -> String {
    match (stack, kind) {
        (Stack::Encoder, _) => format!("enc.{layer}.attn"),
        (Stack::Decoder, AttentionKind::SelfAttention) => format!("dec.{layer}.self_attn"),
        (Stack::Decoder, AttentionKind::CrossAttention) => format!("dec.{layer}.cross_attn"),
    }
}

/// Every attention module of a model, in forward order.
pub fn attention_modules(dims: &ArchitectureDims) -> Vec<(Stack, usize, AttentionKind)> {
    let mut out: Vec<_> = (0..dims.n_enc_layers).map(|l| (Stack::Encoder, l, AttentionKind::SelfAttention)).collect();
    for l in 0..dims.n_dec_layers {
        out.push((Stack::Decoder, l, AttentionKind::SelfAttention));
        out.push((Stack::Decoder, l, AttentionKind::CrossAttention));
    }
    out
}

/// Every (stack, layer) pair, encoder first.
pub fn layers(dims: &ArchitectureDims) -> Vec<(Stack, usize)> {
    (0..dims.n_enc_layers)
        .map(|l| (Stack::Encoder, l))
        .chain((0..dims.n_dec_layers).map(|l| (Stack::Decoder, l)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleShape {
    /// One factor per soft token (`k×1`).
    Vector,
    /// A single factor for the whole prompt (`1×1`).
    Scalar,
    /// One factor per prompt entry (`k×n_e`).
    Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSlot {
    Adapter,
    Lora,
    Prefix,
}

/// A linear map of an adapter, either dense or a sum of Kronecker products.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterLinear {
    Dense {
        weight: String,
        bias: String,
    },
    /// `W = Σ_i kron(rule_i, left_i · right_i)`.
    Phm {
        rules: Vec<String>,
        left: Vec<String>,
        right: Vec<String>,
        bias: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hook {
    Prompt { prompt: String, scale: Option<(String, ScaleShape)> },
    Gate { slot: GateSlot, weight: String },
    Prefix { keys: String, values: String, gated: bool },
    Lora { target: Projection, a: String, b: String, scaling: f64, gated: bool },
    Ia3Keys { vector: String },
    Ia3Values { vector: String },
    Ia3Inner { vector: String },
    Adapter { down: AdapterLinear, up: AdapterLinear, gated: bool },
}

impl Hook {
    fn allowed_at(&self, point: &AttachPoint) -> bool {
        matches!(
            (self, point),
            (Hook::Prompt { .. }, AttachPoint::EncoderInput)
                | (Hook::Gate { .. }, AttachPoint::LayerInput { .. })
                | (Hook::Prefix { .. } | Hook::Lora { .. } | Hook::Ia3Keys { .. } | Hook::Ia3Values { .. }, AttachPoint::Attention { .. })
                | (Hook::Ia3Inner { .. }, AttachPoint::FfnInner { .. })
                | (Hook::Adapter { .. }, AttachPoint::FfnOutput { .. })
        )
    }

    /// Method parameter names this hook reads.
    pub fn param_names(&self) -> Vec<&str> {
        match self {
            Hook::Prompt { prompt, scale } => {
                let mut v = vec![prompt.as_str()];
                if let Some((s, _)) = scale {
                    v.push(s.as_str());
                }
                v
            }
            Hook::Gate { weight, .. } => vec![weight.as_str()],
            Hook::Prefix { keys, values, .. } => vec![keys.as_str(), values.as_str()],
            Hook::Lora { a, b, .. } => vec![a.as_str(), b.as_str()],
            Hook::Ia3Keys { vector } | Hook::Ia3Values { vector } | Hook::Ia3Inner { vector } => vec![vector.as_str()],
            Hook::Adapter { down, up, .. } => {
                let mut v = Vec::new();
                for l in [down, up] {
                    match l {
                        AdapterLinear::Dense { weight, bias } => {
                            v.push(weight.as_str());
                            v.push(bias.as_str());
                        }
                        AdapterLinear::Phm { rules, left, right, bias } => {
                            v.extend(rules.iter().map(String::as_str));
                            v.extend(left.iter().map(String::as_str));
                            v.extend(right.iter().map(String::as_str));
                            v.push(bias.as_str());
                        }
                    }
                }
                v
            }
        }
    }
}

/// Hooks installed per attachment point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookTable {
    entries: BTreeMap<AttachPoint, Vec<Hook>>,
}

impl HookTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, point: AttachPoint, hook: Hook) {
        self.entries.entry(point).or_default().push(hook);
    }

    pub fn at(&self, point: &AttachPoint) -> &[Hook] {
        self.entries.get(point).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AttachPoint, &Hook)> {
        self.entries.iter().flat_map(|(p, hs)| hs.iter().map(move |h| (p, h)))
    }

    /// Every point must exist in `dims` and carry only hooks that make sense there.
    pub fn validate(&self, dims: &ArchitectureDims) -> Result<()> {
        for (point, hook) in self.iter() {
            point.validate(dims)?;
            if !hook.allowed_at(point) {
                return Err(Error::config(format!("hook {hook:?} cannot attach at {point}")));
            }
        }
        Ok(())
    }
}

/// Hooks plus the parameters they read, as seen by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PeftHooks<'a, T> {
    pub table: &'a HookTable,
    pub params: Option<&'a ParamStore<T>>,
}

static EMPTY_TABLE: HookTable = HookTable { entries: BTreeMap::new() };

impl<'a, T> PeftHooks<'a, T> {
    /// No hooks: the plain backbone.
    pub fn none() -> Self {
        Self { table: &EMPTY_TABLE, params: None }
    }

    pub fn new(table: &'a HookTable, params: &'a ParamStore<T>) -> Self {
        Self { table, params: Some(params) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonexistent_points_are_rejected() {
        let dims = ArchitectureDims::tiny();
        let mut t = HookTable::new();
        t.add(
            AttachPoint::FfnInner { stack: Stack::Encoder, layer: 5 },
            Hook::Ia3Inner { vector: "x".into() },
        );
        assert!(matches!(t.validate(&dims), Err(Error::Config(_))));

        let mut t = HookTable::new();
        t.add(
            AttachPoint::Attention { stack: Stack::Encoder, layer: 0, kind: AttentionKind::CrossAttention },
            Hook::Ia3Keys { vector: "x".into() },
        );
        assert!(t.validate(&dims).is_err());

        let mut t = HookTable::new();
        t.add(AttachPoint::EncoderInput, Hook::Ia3Inner { vector: "x".into() });
        assert!(t.validate(&dims).is_err());
    }

    #[test]
    fn attention_module_enumeration() {
        let dims = ArchitectureDims::toy(100);
        assert_eq!(attention_modules(&dims).len(), 2 + 2 * 2);
        assert_eq!(attention_prefix(Stack::Decoder, 1, AttentionKind::CrossAttention), "dec.1.cross_attn");
    }
}
