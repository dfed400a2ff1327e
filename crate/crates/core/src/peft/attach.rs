use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ArchitectureDims, Seq2SeqModel, TokenBatch};
use crate::peft::config::{PeftConfig, PrefixPlacement};
use crate::peft::hooks::{
    attention_modules, attention_prefix, layers, AdapterLinear, AttachPoint, AttentionKind, GateSlot, Hook, HookTable,
    PeftHooks, Projection, ScaleShape, Stack,
};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Copies of randomly chosen embedding rows.
    VocabRows,
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    shape: [usize; 2],
    init: Init,
}

fn stack_name(s: Stack) -> &'static str {
    match s {
        Stack::Encoder => "enc",
        Stack::Decoder => "dec",
    }
}

struct Builder<'d> {
    dims: &'d ArchitectureDims,
    slots: Vec<Slot>,
    table: HookTable,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init) -> String {
        if !self.slots.iter().any(|s| s.name == name) {
            self.slots.push(Slot { name: name.clone(), shape, init });
        }
        name
    }

    fn prefix(&mut self, len: usize, placement: PrefixPlacement, gated: bool) {
        let inner = self.dims.inner_dim();
        for (stack, layer, kind) in attention_modules(self.dims) {
            let keep = match placement {
                PrefixPlacement::AllAttention => true,
                PrefixPlacement::EncoderOnly => stack == Stack::Encoder,
                PrefixPlacement::EncAndDecSelf => kind == AttentionKind::SelfAttention,
            };
            if !keep {
                continue;
            }
            let base = format!("peft.{}", attention_prefix(stack, layer, kind));
            let keys = self.add(format!("{base}.prefix_k"), [len, inner], Init::Normal(1.0));
            let values = self.add(format!("{base}.prefix_v"), [len, inner], Init::Normal(1.0));
            self.table.add(AttachPoint::Attention { stack, layer, kind }, Hook::Prefix { keys, values, gated });
        }
    }

    fn lora(&mut self, rank: usize, targets: &[Projection], scaling: f64, gated: bool) {
        let d = self.dims.d_model;
        let inner = self.dims.inner_dim();
        for (stack, layer, kind) in attention_modules(self.dims) {
            let base = format!("peft.{}", attention_prefix(stack, layer, kind));
            for &target in targets {
                let (din, dout, tag) = match target {
                    Projection::Query => (d, inner, "q"),
                    Projection::Key => (d, inner, "k"),
                    Projection::Value => (d, inner, "v"),
                    Projection::Output => (inner, d, "o"),
                };
                let a = self.add(format!("{base}.lora_{tag}.a"), [din, rank], Init::Normal(1.0 / (din as f64).sqrt()));
                let b = self.add(format!("{base}.lora_{tag}.b"), [rank, dout], Init::Zeros);
                self.table.add(AttachPoint::Attention { stack, layer, kind }, Hook::Lora { target, a, b, scaling, gated });
            }
        }
    }

    fn adapter(&mut self, reduction: usize, gated: bool) {
        let d = self.dims.d_model;
        let b = d / reduction;
        for (stack, layer) in layers(self.dims) {
            let base = format!("peft.{}.{layer}.adapter", stack_name(stack));
            let down = AdapterLinear::Dense {
                weight: self.add(format!("{base}.down.w"), [d, b], Init::Normal(1.0 / (d as f64).sqrt())),
                bias: self.add(format!("{base}.down.b"), [1, b], Init::Zeros),
            };
            let up = AdapterLinear::Dense {
                weight: self.add(format!("{base}.up.w"), [b, d], Init::Zeros),
                bias: self.add(format!("{base}.up.b"), [1, d], Init::Zeros),
            };
            self.table.add(AttachPoint::FfnOutput { stack, layer }, Hook::Adapter { down, up, gated });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn phm(&mut self, base: &str, rules_base: &str, n: usize, din: usize, dout: usize, rank: usize, zero_right: bool) -> AdapterLinear {
        let mut rules = Vec::new();
        let mut left = Vec::new();
        let mut right = Vec::new();
        for i in 0..n {
            rules.push(self.add(format!("{rules_base}.rule.{i}"), [n, n], Init::Normal(1.0 / (n as f64).sqrt())));
            left.push(self.add(format!("{base}.s.{i}"), [din / n, rank], Init::Normal(1.0 / (din as f64).sqrt())));
            let init = if zero_right { Init::Zeros } else { Init::Normal(1.0 / (rank as f64).sqrt()) };
            right.push(self.add(format!("{base}.t.{i}"), [rank, dout / n], init));
        }
        let bias = self.add(format!("{base}.b"), [1, dout], Init::Zeros);
        AdapterLinear::Phm { rules, left, right, bias }
    }

    fn compacter(&mut self, n: usize, reduction: usize, rank: usize, share: bool) {
        let d = self.dims.d_model;
        let b = d / reduction;
        for (stack, layer) in layers(self.dims) {
            let base = format!("peft.{}.{layer}.adapter", stack_name(stack));
            let (rd, ru) = if share {
                ("peft.phm.down".to_string(), "peft.phm.up".to_string())
            } else {
                (format!("{base}.down"), format!("{base}.up"))
            };
            let down = self.phm(&format!("{base}.down"), &rd, n, d, b, rank, false);
            let up = self.phm(&format!("{base}.up"), &ru, n, b, d, rank, true);
            self.table.add(AttachPoint::FfnOutput { stack, layer }, Hook::Adapter { down, up, gated: false });
        }
    }

    fn ia3(&mut self) {
        let inner = self.dims.inner_dim();
        for (stack, layer, kind) in attention_modules(self.dims) {
            let base = format!("peft.{}", attention_prefix(stack, layer, kind));
            let point = AttachPoint::Attention { stack, layer, kind };
            let k = self.add(format!("{base}.ia3_k"), [inner, 1], Init::Ones);
            let v = self.add(format!("{base}.ia3_v"), [inner, 1], Init::Ones);
            self.table.add(point, Hook::Ia3Keys { vector: k });
            self.table.add(point, Hook::Ia3Values { vector: v });
        }
        for (stack, layer) in layers(self.dims) {
            let name = self.add(format!("peft.{}.{layer}.ffn.ia3", stack_name(stack)), [self.dims.d_ff, 1], Init::Ones);
            self.table.add(AttachPoint::FfnInner { stack, layer }, Hook::Ia3Inner { vector: name });
        }
    }

    fn gates(&mut self) {
        let d = self.dims.d_model;
        for (stack, layer) in layers(self.dims) {
            for (slot, tag) in [(GateSlot::Adapter, "adapter"), (GateSlot::Lora, "lora"), (GateSlot::Prefix, "prefix")] {
                let weight = self.add(format!("peft.{}.{layer}.gate.{tag}", stack_name(stack)), [d, 1], Init::Zeros);
                self.table.add(AttachPoint::LayerInput { stack, layer }, Hook::Gate { slot, weight });
            }
        }
    }
}

/// Method tensors and hooks for `config` on `dims`, in a fixed order.
fn plan(config: &PeftConfig, dims: &ArchitectureDims) -> Result<(Vec<Slot>, HookTable)> {
    dims.validate()?;
    config.validate(dims)?;
    let mut b = Builder { dims, slots: Vec::new(), table: HookTable::new() };
    match config {
        PeftConfig::FineTune => {}
        PeftConfig::PromptTuning { k } => {
            let prompt = b.add("peft.soft_prompt".into(), [*k, dims.d_model], Init::VocabRows);
            b.table.add(AttachPoint::EncoderInput, Hook::Prompt { prompt, scale: None });
        }
        PeftConfig::ScaledPromptTuning { k, scale_shape } => {
            let prompt = b.add("peft.soft_prompt".into(), [*k, dims.d_model], Init::VocabRows);
            let shape = match scale_shape {
                ScaleShape::Vector => [*k, 1],
                ScaleShape::Scalar => [1, 1],
                ScaleShape::Matrix => [*k, dims.d_model],
            };
            let s = b.add("peft.scaling_vector".into(), shape, Init::Ones);
            b.table.add(AttachPoint::EncoderInput, Hook::Prompt { prompt, scale: Some((s, *scale_shape)) });
        }
        PeftConfig::PrefixTuning { len, placement } => b.prefix(*len, *placement, false),
        PeftConfig::LoRA { rank, targets, scaling } => b.lora(*rank, targets, *scaling, false),
        PeftConfig::BottleneckAdapter { reduction } => b.adapter(*reduction, false),
        PeftConfig::Compacter { phm_n, reduction, factor_rank, share_slow } => {
            b.compacter(*phm_n, *reduction, *factor_rank, *share_slow)
        }
        PeftConfig::IA3 => b.ia3(),
        PeftConfig::UniPELT { adapter_reduction, lora_rank, prefix_len, prefix_placement } => {
            b.gates();
            b.adapter(*adapter_reduction, true);
            b.lora(*lora_rank, &[Projection::Query, Projection::Value], 1.0, true);
            b.prefix(*prefix_len, *prefix_placement, true);
        }
    }
    b.table.validate(dims)?;
    Ok((b.slots, b.table))
}

/// Shapes of every method tensor `config` would allocate on `dims`.
pub fn method_shapes(config: &PeftConfig, dims: &ArchitectureDims) -> Result<Vec<(String, [usize; 2])>> {
    Ok(plan(config, dims)?.0.into_iter().map(|s| (s.name, s.shape)).collect())
}

/// A backbone with one tuning method attached.
#[derive(Debug, Clone)]
pub struct AttachedModel<T> {
    backbone: Seq2SeqModel<T>,
    config: PeftConfig,
    method: ParamStore<T>,
    table: HookTable,
}

impl<T: Scalar> AttachedModel<T> {
    /// Allocates and initializes the method tensors and sets the freezing mask.
    pub fn attach<R: Rng + ?Sized>(mut backbone: Seq2SeqModel<T>, config: PeftConfig, rng: &mut R) -> Result<Self> {
        let (slots, table) = plan(&config, backbone.dims())?;
        let mut method = ParamStore::new();
        for slot in slots {
            let t = match slot.init {
                Init::Zeros => Tensor::zeros(&slot.shape),
                Init::Ones => Tensor::ones(&slot.shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                    Tensor::from_fn(&slot.shape, |_| T::from_f64_lossy(dist.sample(rng)))
                }
                Init::VocabRows => {
                    let emb = backbone.params().get("shared.embedding")?;
                    let (vocab, _) = emb.dims2()?;
                    let k = slot.shape[0];
                    let rows: Vec<usize> = if k <= vocab {
                        sample(rng, vocab, k).into_vec()
                    } else {
                        (0..k).map(|_| rng.random_range(0..vocab)).collect()
                    };
                    let data = rows.iter().flat_map(|&r| emb.row(r).iter().copied()).collect();
                    Tensor::new(&slot.shape, data)?
                }
            };
            method.insert(slot.name, t.with_trainable(true))?;
        }
        backbone.params_mut().set_all_trainable(config == PeftConfig::FineTune);
        Ok(Self { backbone, config, method, table })
    }

    /// Reassembles an attached model from stored tensors; names and shapes are checked.
    pub fn from_parts(mut backbone: Seq2SeqModel<T>, config: PeftConfig, mut method: ParamStore<T>) -> Result<Self> {
        let (slots, table) = plan(&config, backbone.dims())?;
        if slots.len() != method.len() {
            return Err(Error::config(format!(
                "{} expects {} method tensors, found {}",
                config.label(),
                slots.len(),
                method.len()
            )));
        }
        for slot in &slots {
            let t = method.get(&slot.name)?;
            if t.shape() != slot.shape {
                return Err(Error::shape("attach", format!("{}: expected {:?}, got {:?}", slot.name, slot.shape, t.shape())));
            }
        }
        method.set_all_trainable(true);
        backbone.params_mut().set_all_trainable(config == PeftConfig::FineTune);
        Ok(Self { backbone, config, method, table })
    }

    pub fn config(&self) -> &PeftConfig {
        &self.config
    }

    pub fn dims(&self) -> &ArchitectureDims {
        self.backbone.dims()
    }

    pub fn backbone(&self) -> &Seq2SeqModel<T> {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Seq2SeqModel<T> {
        &mut self.backbone
    }

    pub fn method_params(&self) -> &ParamStore<T> {
        &self.method
    }

    pub fn method_params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.method
    }

    pub fn hook_table(&self) -> &HookTable {
        &self.table
    }

    pub fn hooks(&self) -> PeftHooks<'_, T> {
        PeftHooks::new(&self.table, &self.method)
    }

    /// Both stores mutably, for optimizers that update backbone and method together.
    pub fn stores_mut(&mut self) -> (&mut ParamStore<T>, &mut ParamStore<T>) {
        (self.backbone.params_mut(), &mut self.method)
    }

    pub fn into_parts(self) -> (Seq2SeqModel<T>, PeftConfig, ParamStore<T>) {
        (self.backbone, self.config, self.method)
    }

    /// Backbone tensors left trainable: all of them under fine-tuning, none otherwise.
    pub fn freezing_mask(&self) -> BTreeSet<String> {
        self.backbone.params().trainable_names().into_iter().collect()
    }

    pub fn trainable_parameter_ids(&self) -> BTreeSet<String> {
        let mut ids = self.freezing_mask();
        ids.extend(self.method.trainable_names());
        ids
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> u64 {
        self.backbone
            .params()
            .iter()
            .chain(self.method.iter())
            .filter(|(_, t)| t.is_trainable())
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    pub fn forward_logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        self.backbone.forward_logits(batch, self.hooks())
    }

    pub fn teacher_forced_loss(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var> {
        self.backbone.teacher_forced_loss(g, batch, self.hooks())
    }

    pub fn loss_value(&self, batch: &TokenBatch) -> Result<f64> {
        self.backbone.loss_value(batch, self.hooks())
    }

    pub fn greedy_decode(&self, enc_tokens: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.backbone.greedy_decode(enc_tokens, self.hooks(), max_len)
    }

    /// Runs backward for `batch` and accumulates into both stores. Returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &TokenBatch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.teacher_forced_loss(&mut g, batch)?;
        let value = g.scalar(loss).to_f64_lossy();
        let grads = g.backward(loss)?;
        grads.accumulate_into(self.backbone.params_mut())?;
        grads.accumulate_into(&mut self.method)?;
        Ok(value)
    }
}
