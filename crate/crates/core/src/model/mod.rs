//! T5-topology encoder-decoder: pre-RMS-norm residual blocks, relative
//! position bias computed once per stack, tied input/output embedding, no
//! projection biases.
//!
//! Weights act on row vectors: a projection computes `x · W` with `W` of shape
//! `d_in × d_out`.

mod batch;
mod dims;
pub mod relpos;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use batch::{Example, TokenBatch, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
pub use dims::ArchitectureDims;

use crate::autodiff::Graph;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::peft::hooks::{
    attention_prefix, AdapterLinear, AttachPoint, AttentionKind, GateSlot, Hook, PeftHooks, Projection, Stack,
};
use crate::peft::ops;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Large negative logit used to mask future positions.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
}

/// Every backbone tensor in creation order with its shape and initializer.
fn layout(d: &ArchitectureDims) -> Vec<(String, [usize; 2], Init)> {
    let dm = d.d_model;
    let inner = d.inner_dim();
    let attn = |prefix: &str, out: &mut Vec<(String, [usize; 2], Init)>| {
        let s_in = 1.0 / (dm as f64).sqrt();
        let s_out = 1.0 / (inner as f64).sqrt();
        for p in ["q", "k", "v"] {
            out.push((format!("{prefix}.{p}"), [dm, inner], Init::Normal(s_in)));
        }
        out.push((format!("{prefix}.o"), [inner, dm], Init::Normal(s_out)));
    };
    let ffn = |prefix: &str, out: &mut Vec<(String, [usize; 2], Init)>| {
        out.push((format!("{prefix}.w1"), [dm, d.d_ff], Init::Normal(1.0 / (dm as f64).sqrt())));
        out.push((format!("{prefix}.w2"), [d.d_ff, dm], Init::Normal(1.0 / (d.d_ff as f64).sqrt())));
    };
    let norm = |name: String| (name, [1, dm], Init::Ones);

    let mut out = vec![
        ("shared.embedding".to_string(), [d.vocab_size, dm], Init::Normal(1.0)),
        ("enc.rel_bias".to_string(), [d.rel_buckets, d.n_heads], Init::Normal(0.1)),
        ("dec.rel_bias".to_string(), [d.rel_buckets, d.n_heads], Init::Normal(0.1)),
    ];
    for l in 0..d.n_enc_layers {
        out.push(norm(format!("enc.{l}.attn_norm")));
        attn(&format!("enc.{l}.attn"), &mut out);
        out.push(norm(format!("enc.{l}.ffn_norm")));
        ffn(&format!("enc.{l}.ffn"), &mut out);
    }
    out.push(norm("enc.final_norm".into()));
    for l in 0..d.n_dec_layers {
        out.push(norm(format!("dec.{l}.self_norm")));
        attn(&format!("dec.{l}.self_attn"), &mut out);
        out.push(norm(format!("dec.{l}.cross_norm")));
        attn(&format!("dec.{l}.cross_attn"), &mut out);
        out.push(norm(format!("dec.{l}.ffn_norm")));
        ffn(&format!("dec.{l}.ffn"), &mut out);
    }
    out.push(norm("dec.final_norm".into()));
    out
}

/// Names and shapes of every backbone tensor for `dims`.
pub fn backbone_shapes(dims: &ArchitectureDims) -> Vec<(String, [usize; 2])> {
    layout(dims).into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T> {
    dims: ArchitectureDims,
    params: ParamStore<T>,
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Randomly initialized backbone; every tensor starts trainable.
    pub fn new(dims: ArchitectureDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&dims) {
            let t = match init {
                Init::Ones => Tensor::ones(&shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                    Tensor::from_fn(&shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
                }
            };
            params.insert(name, t.with_trainable(true))?;
        }
        Ok(Self { dims, params })
    }

    /// Wraps an existing parameter set; names and shapes must match `dims` exactly.
    pub fn from_params(dims: ArchitectureDims, params: ParamStore<T>) -> Result<Self> {
        dims.validate()?;
        let expected = backbone_shapes(&dims);
        if expected.len() != params.len() {
            return Err(Error::config(format!("expected {} backbone tensors, got {}", expected.len(), params.len())));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape {
                return Err(Error::shape("from_params", format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> &ArchitectureDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Logits `[batch × l_dec × vocab]`; padded decoder positions are zero.
    pub fn forward_logits(&self, batch: &TokenBatch, hooks: PeftHooks<'_, T>) -> Result<Tensor<T>> {
        batch.validate(self.dims.vocab_size)?;
        let v = self.dims.vocab_size;
        let l = batch.max_dec_len();
        let mut out = vec![T::zero(); batch.len() * l * v];
        let mut g = Graph::new();
        let mut fw = Forward::new(self, hooks)?;
        for i in 0..batch.len() {
            let ex = batch.example(i);
            let logits = fw.example_logits(&mut g, &ex.enc, &ex.dec_input)?;
            let vals = g.value(logits);
            let mut src = 0;
            for (pos, &m) in batch.dec_mask[i].iter().enumerate() {
                if m {
                    let dst = (i * l + pos) * v;
                    out[dst..dst + v].copy_from_slice(&vals[src * v..(src + 1) * v]);
                    src += 1;
                }
            }
        }
        Tensor::new(&[batch.len(), l, v], out)
    }

    /// Mean cross-entropy over every non-padding target token of the batch.
    pub fn teacher_forced_loss(&self, g: &mut Graph<T>, batch: &TokenBatch, hooks: PeftHooks<'_, T>) -> Result<Var> {
        batch.validate(self.dims.vocab_size)?;
        let mut fw = Forward::new(self, hooks)?;
        let mut parts = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for i in 0..batch.len() {
            let ex = batch.example(i);
            if ex.dec_input.is_empty() {
                continue;
            }
            parts.push(fw.example_logits(g, &ex.enc, &ex.dec_input)?);
            targets.extend(ex.dec_target.iter().map(|&t| Some(t)));
        }
        if parts.is_empty() {
            return Err(Error::contract("teacher-forced loss over an all-padding target"));
        }
        let logits = g.concat_rows(&parts)?;
        g.cross_entropy(logits, &targets)
    }

    /// Loss value without keeping the graph.
    pub fn loss_value(&self, batch: &TokenBatch, hooks: PeftHooks<'_, T>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.teacher_forced_loss(&mut g, batch, hooks)?;
        Ok(g.scalar(loss).to_f64_lossy())
    }

    /// Greedy argmax decoding from the begin id. The returned tokens exclude
    /// the begin and end ids; at most `max_len` tokens are produced.
    pub fn greedy_decode(&self, enc_tokens: &[usize], hooks: PeftHooks<'_, T>, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("greedy_decode needs max_len >= 1"));
        }
        if let Some(bad) = enc_tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::Index { op: "greedy_decode", detail: format!("token {bad} >= vocab {}", self.dims.vocab_size) });
        }
        let mut fw = Forward::new(self, hooks)?;
        let mut g = Graph::new();
        let memory = fw.encode(&mut g, enc_tokens)?;
        let memory = g.tensor(memory);
        let mut seq = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new();
            fw.cache.clear();
            let mem = g.constant(&memory)?;
            let logits = fw.decode(&mut g, mem, &seq)?;
            let (t, v) = g.shape(logits);
            let last = &g.value(logits)[(t - 1) * v..t * v];
            let mut best = 0;
            for (i, x) in last.iter().enumerate() {
                if *x > last[best] {
                    best = i;
                }
            }
            if best == EOS_ID {
                break;
            }
            out.push(best);
            seq.push(best);
        }
        Ok(out)
    }
}

/// Per-call forward state: parameter leaves are recorded once per graph.
struct Forward<'m, 'h, T> {
    model: &'m Seq2SeqModel<T>,
    hooks: PeftHooks<'h, T>,
    cache: HashMap<String, Var>,
}

impl<'m, 'h, T: Scalar> Forward<'m, 'h, T> {
    fn new(model: &'m Seq2SeqModel<T>, hooks: PeftHooks<'h, T>) -> Result<Self> {
        hooks.table.validate(&model.dims)?;
        if !hooks.table.is_empty() && hooks.params.is_none() {
            return Err(Error::config("hooks installed without method parameters"));
        }
        Ok(Self { model, hooks, cache: HashMap::new() })
    }

    fn p(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(*v);
        }
        let v = if self.model.params.contains(name) {
            g.param(&self.model.params, name)?
        } else {
            let store = self.hooks.params.ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
            g.param(store, name)?
        };
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn hooks_at(&self, point: AttachPoint) -> &'h [Hook] {
        self.hooks.table.at(&point)
    }

    fn example_logits(&mut self, g: &mut Graph<T>, enc: &[usize], dec_input: &[usize]) -> Result<Var> {
        let memory = self.encode(g, enc)?;
        self.decode(g, memory, dec_input)
    }

    fn encode(&mut self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        let dims = self.model.dims.clone();
        let emb = self.p(g, "shared.embedding")?;
        let mut x = g.embedding(emb, ids)?;
        for hook in self.hooks_at(AttachPoint::EncoderInput) {
            if let Hook::Prompt { prompt, scale } = hook {
                let xp = self.p(g, prompt)?;
                x = match scale {
                    None => ops::compose_prompt(g, xp, x)?,
                    Some((s, shape)) => {
                        let s = self.p(g, s)?;
                        ops::compose_scaled_prompt(g, xp, s, *shape, x)?
                    }
                };
            }
        }
        let t = g.shape(x).0;
        if t > dims.max_positions {
            return Err(Error::config(format!(
                "encoder input of {t} positions exceeds capacity {}",
                dims.max_positions
            )));
        }
        if t == 0 {
            return Err(Error::contract("empty encoder input"));
        }
        let bias = self.position_bias(g, Stack::Encoder, t)?;
        for l in 0..dims.n_enc_layers {
            let gates = self.gates(g, Stack::Encoder, l, x)?;
            let n = self.p(g, &format!("enc.{l}.attn_norm"))?;
            let h = g.rms_norm(x, n)?;
            let a = self.attention(g, Stack::Encoder, l, AttentionKind::SelfAttention, h, h, Some(&bias), false, &gates)?;
            x = g.add(x, a)?;
            let n = self.p(g, &format!("enc.{l}.ffn_norm"))?;
            let h = g.rms_norm(x, n)?;
            let f = self.ffn(g, Stack::Encoder, l, h, &gates)?;
            x = g.add(x, f)?;
        }
        let n = self.p(g, "enc.final_norm")?;
        g.rms_norm(x, n)
    }

    fn decode(&mut self, g: &mut Graph<T>, memory: Var, ids: &[usize]) -> Result<Var> {
        let dims = self.model.dims.clone();
        let emb = self.p(g, "shared.embedding")?;
        let mut x = g.embedding(emb, ids)?;
        let t = ids.len();
        let bias = self.position_bias(g, Stack::Decoder, t)?;
        for l in 0..dims.n_dec_layers {
            let gates = self.gates(g, Stack::Decoder, l, x)?;
            let n = self.p(g, &format!("dec.{l}.self_norm"))?;
            let h = g.rms_norm(x, n)?;
            let a = self.attention(g, Stack::Decoder, l, AttentionKind::SelfAttention, h, h, Some(&bias), true, &gates)?;
            x = g.add(x, a)?;
            let n = self.p(g, &format!("dec.{l}.cross_norm"))?;
            let h = g.rms_norm(x, n)?;
            let a = self.attention(g, Stack::Decoder, l, AttentionKind::CrossAttention, h, memory, None, false, &gates)?;
            x = g.add(x, a)?;
            let n = self.p(g, &format!("dec.{l}.ffn_norm"))?;
            let h = g.rms_norm(x, n)?;
            let f = self.ffn(g, Stack::Decoder, l, h, &gates)?;
            x = g.add(x, f)?;
        }
        let n = self.p(g, "dec.final_norm")?;
        let x = g.rms_norm(x, n)?;
        let logits = g.matmul_nt(x, emb)?;
        Ok(g.scale(logits, T::from_f64_lossy(1.0 / (dims.d_model as f64).sqrt())))
    }

    /// One `t × t` bias matrix per head, shared by every layer of the stack.
    fn position_bias(&mut self, g: &mut Graph<T>, stack: Stack, t: usize) -> Result<Vec<Var>> {
        let d = &self.model.dims;
        let (name, bidirectional) = match stack {
            Stack::Encoder => ("enc.rel_bias", true),
            Stack::Decoder => ("dec.rel_bias", false),
        };
        let grid = relpos::bucket_grid(t, t, 0, bidirectional, d.rel_buckets, d.max_rel_distance);
        let heads = d.n_heads;
        let table = self.p(g, name)?;
        (0..heads)
            .map(|h| g.gather(table, grid.iter().map(|b| b * heads + h).collect(), t, t))
            .collect()
    }

    fn gates(&mut self, g: &mut Graph<T>, stack: Stack, layer: usize, x: Var) -> Result<HashMap<GateSlot, Var>> {
        let mut out = HashMap::new();
        let hooks = self.hooks_at(AttachPoint::LayerInput { stack, layer });
        if hooks.is_empty() {
            return Ok(out);
        }
        let pooled = g.mean_rows(x)?;
        for hook in hooks {
            if let Hook::Gate { slot, weight } = hook {
                let w = self.p(g, weight)?;
                out.insert(*slot, ops::gate_value(g, pooled, w)?);
            }
        }
        Ok(out)
    }

    fn gated(g: &mut Graph<T>, gates: &HashMap<GateSlot, Var>, slot: GateSlot, gated: bool, x: Var) -> Result<Var> {
        if !gated {
            return Ok(x);
        }
        let gate = gates.get(&slot).ok_or_else(|| Error::config(format!("no {slot:?} gate installed for a gated hook")))?;
        g.scale_by(x, *gate)
    }

    /// Projection `input · W` plus any LoRA deltas targeting it.
    fn project(
        &mut self,
        g: &mut Graph<T>,
        hooks: &[Hook],
        prefix: &str,
        which: Projection,
        input: Var,
        gates: &HashMap<GateSlot, Var>,
    ) -> Result<Var> {
        let suffix = match which {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        };
        let w = self.p(g, &format!("{prefix}.{suffix}"))?;
        let mut y = g.matmul(input, w)?;
        for hook in hooks {
            if let Hook::Lora { target, a, b, scaling, gated } = hook {
                if *target == which {
                    let a = self.p(g, a)?;
                    let b = self.p(g, b)?;
                    let delta = ops::lora_delta(g, input, a, b, T::from_f64_lossy(*scaling))?;
                    let delta = Self::gated(g, gates, GateSlot::Lora, *gated, delta)?;
                    y = g.add(y, delta)?;
                }
            }
        }
        Ok(y)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        g: &mut Graph<T>,
        stack: Stack,
        layer: usize,
        kind: AttentionKind,
        query_in: Var,
        kv_in: Var,
        bias: Option<&[Var]>,
        causal: bool,
        gates: &HashMap<GateSlot, Var>,
    ) -> Result<Var> {
        let d = self.model.dims.clone();
        let prefix = attention_prefix(stack, layer, kind);
        let hooks = self.hooks_at(AttachPoint::Attention { stack, layer, kind });

        let q = self.project(g, hooks, &prefix, Projection::Query, query_in, gates)?;
        let mut k = self.project(g, hooks, &prefix, Projection::Key, kv_in, gates)?;
        let mut v = self.project(g, hooks, &prefix, Projection::Value, kv_in, gates)?;
        let mut p = 0;
        for hook in hooks {
            match hook {
                Hook::Ia3Keys { vector } => {
                    let l = self.p(g, vector)?;
                    k = ops::ia3_rescale(g, k, l)?;
                }
                Hook::Ia3Values { vector } => {
                    let l = self.p(g, vector)?;
                    v = ops::ia3_rescale(g, v, l)?;
                }
                _ => {}
            }
        }
        for hook in hooks {
            if let Hook::Prefix { keys, values, gated } = hook {
                let mut pk = self.p(g, keys)?;
                let mut pv = self.p(g, values)?;
                pk = Self::gated(g, gates, GateSlot::Prefix, *gated, pk)?;
                pv = Self::gated(g, gates, GateSlot::Prefix, *gated, pv)?;
                p += g.shape(pk).0;
                (k, v) = ops::prefix_kv_extend(g, k, v, pk, pv)?;
            }
        }

        let tq = g.shape(q).0;
        let tk = g.shape(k).0;
        let mask: Option<Vec<T>> = causal.then(|| {
            let neg = T::from_f64_lossy(MASK_NEG);
            let mut m = vec![T::zero(); tq * tk];
            for i in 0..tq {
                for j in p..tk {
                    if j - p > i {
                        m[i * tk + j] = neg;
                    }
                }
            }
            m
        });
        let zeros = if p > 0 && bias.is_some() { Some(g.constant_from(tq, p, vec![T::zero(); tq * p])?) } else { None };
        let inv = T::from_f64_lossy(1.0 / (d.d_kv as f64).sqrt());
        let mut heads = Vec::with_capacity(d.n_heads);
        for h in 0..d.n_heads {
            let qh = g.slice_cols(q, h * d.d_kv, d.d_kv)?;
            let kh = g.slice_cols(k, h * d.d_kv, d.d_kv)?;
            let vh = g.slice_cols(v, h * d.d_kv, d.d_kv)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, inv);
            if let Some(b) = bias {
                let b = match zeros {
                    Some(z) => g.concat_cols(&[z, b[h]])?,
                    None => b[h],
                };
                s = g.add(s, b)?;
            }
            if let Some(m) = &mask {
                s = g.add_const(s, m)?;
            }
            let a = g.softmax_rows(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.project(g, hooks, &prefix, Projection::Output, cat, gates)
    }

    fn ffn(&mut self, g: &mut Graph<T>, stack: Stack, layer: usize, h: Var, gates: &HashMap<GateSlot, Var>) -> Result<Var> {
        let s = match stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let w1 = self.p(g, &format!("{s}.{layer}.ffn.w1"))?;
        let w2 = self.p(g, &format!("{s}.{layer}.ffn.w2"))?;
        let pre = g.matmul(h, w1)?;
        let mut a = g.relu(pre);
        for hook in self.hooks_at(AttachPoint::FfnInner { stack, layer }) {
            if let Hook::Ia3Inner { vector } = hook {
                let l = self.p(g, vector)?;
                a = ops::ia3_rescale(g, a, l)?;
            }
        }
        let mut y = g.matmul(a, w2)?;
        for hook in self.hooks_at(AttachPoint::FfnOutput { stack, layer }) {
            if let Hook::Adapter { down, up, gated } = hook {
                let z = self.adapter_linear(g, down, y)?;
                let z = g.relu(z);
                let delta = self.adapter_linear(g, up, z)?;
                let delta = Self::gated(g, gates, GateSlot::Adapter, *gated, delta)?;
                y = g.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn adapter_linear(&mut self, g: &mut Graph<T>, lin: &AdapterLinear, x: Var) -> Result<Var> {
        match lin {
            AdapterLinear::Dense { weight, bias } => {
                let w = self.p(g, weight)?;
                let b = self.p(g, bias)?;
                let y = g.matmul(x, w)?;
                g.add_row(y, b)
            }
            AdapterLinear::Phm { rules, left, right, bias } => {
                let rules = rules.iter().map(|n| self.p(g, n)).collect::<Result<Vec<_>>>()?;
                let left = left.iter().map(|n| self.p(g, n)).collect::<Result<Vec<_>>>()?;
                let right = right.iter().map(|n| self.p(g, n)).collect::<Result<Vec<_>>>()?;
                let b = self.p(g, bias)?;
                ops::phm_linear(g, x, &rules, &left, &right, b)
            }
        }
    }
}
