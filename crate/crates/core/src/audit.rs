//! Closed-form trainable-parameter counts, without instantiating a model.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ArchitectureDims;
use crate::peft::hooks::{attention_modules, attention_prefix, layers, AttentionKind, Projection, ScaleShape, Stack};
use crate::peft::{PeftConfig, PrefixPlacement};

/// Reference model size the published percentages are relative to.
pub const REFERENCE_BASE_TOTAL: u64 = 770_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountBreakdown {
    /// Count per attachment point, in model order.
    pub per_point: IndexMap<String, u64>,
    pub total: u64,
    /// `total / base_total × 100`, rounded to 3 decimals. Fine-tuning is 100 by definition.
    pub percent: f64,
}

fn stack_name(s: Stack) -> &'static str {
    match s {
        Stack::Encoder => "enc",
        Stack::Decoder => "dec",
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

struct Counter {
    per_point: IndexMap<String, u64>,
}

impl Counter {
    fn add(&mut self, point: String, n: u64) {
        *self.per_point.entry(point).or_insert(0) += n;
    }

    fn prefix(&mut self, d: &ArchitectureDims, len: u64, placement: PrefixPlacement) {
        for (s, l, k) in attention_modules(d) {
            let keep = match placement {
                PrefixPlacement::AllAttention => true,
                PrefixPlacement::EncoderOnly => s == Stack::Encoder,
                PrefixPlacement::EncAndDecSelf => k == AttentionKind::SelfAttention,
            };
            if keep {
                self.add(attention_prefix(s, l, k), 2 * len * d.inner_dim() as u64);
            }
        }
    }

    fn lora(&mut self, d: &ArchitectureDims, rank: u64, targets: &[Projection]) {
        let dm = d.d_model as u64;
        let inner = d.inner_dim() as u64;
        let per_module: u64 = targets
            .iter()
            .map(|t| match t {
                Projection::Query | Projection::Key | Projection::Value => rank * (dm + inner),
                Projection::Output => rank * (inner + dm),
            })
            .sum();
        for (s, l, k) in attention_modules(d) {
            self.add(attention_prefix(s, l, k), per_module);
        }
    }

    fn adapter(&mut self, d: &ArchitectureDims, reduction: u64) {
        let dm = d.d_model as u64;
        let b = dm / reduction;
        for (s, l) in layers(d) {
            self.add(format!("{}.{l}.ffn", stack_name(s)), 2 * dm * b + b + dm);
        }
    }
}

pub fn count_trainable(config: &PeftConfig, dims: &ArchitectureDims, base_total: u64) -> Result<CountBreakdown> {
    if base_total == 0 {
        return Err(Error::config("base_total must be > 0"));
    }
    dims.validate()?;
    config.validate(dims)?;
    let dm = dims.d_model as u64;
    let inner = dims.inner_dim() as u64;
    let mut c = Counter { per_point: IndexMap::new() };
    match config {
        PeftConfig::FineTune => c.add("backbone".into(), dims.backbone_param_count()),
        PeftConfig::PromptTuning { k } => c.add("encoder_input".into(), *k as u64 * dm),
        PeftConfig::ScaledPromptTuning { k, scale_shape } => {
            let k = *k as u64;
            let s = match scale_shape {
                ScaleShape::Vector => k,
                ScaleShape::Scalar => 1,
                ScaleShape::Matrix => k * dm,
            };
            c.add("encoder_input".into(), k * dm + s);
        }
        PeftConfig::PrefixTuning { len, placement } => c.prefix(dims, *len as u64, *placement),
        PeftConfig::LoRA { rank, targets, .. } => c.lora(dims, *rank as u64, targets),
        PeftConfig::BottleneckAdapter { reduction } => c.adapter(dims, *reduction as u64),
        PeftConfig::Compacter { phm_n, reduction, factor_rank, share_slow } => {
            let n = *phm_n as u64;
            let b = dm / *reduction as u64;
            let rank = *factor_rank as u64;
            let rules = 2 * n * n * n;
            let factors = |din: u64, dout: u64| n * (din / n * rank + rank * dout / n);
            let per_layer = factors(dm, b) + b + factors(b, dm) + dm;
            if *share_slow {
                c.add("shared_rules".into(), rules);
            }
            for (s, l) in layers(dims) {
                let own = if *share_slow { 0 } else { rules };
                c.add(format!("{}.{l}.ffn", stack_name(s)), per_layer + own);
            }
        }
        PeftConfig::IA3 => {
            for (s, l, k) in attention_modules(dims) {
                c.add(attention_prefix(s, l, k), 2 * inner);
            }
            for (s, l) in layers(dims) {
                c.add(format!("{}.{l}.ffn", stack_name(s)), dims.d_ff as u64);
            }
        }
        PeftConfig::UniPELT { adapter_reduction, lora_rank, prefix_len, prefix_placement } => {
            for (s, l) in layers(dims) {
                c.add(format!("{}.{l}.gates", stack_name(s)), 3 * dm);
            }
            c.adapter(dims, *adapter_reduction as u64);
            c.lora(dims, *lora_rank as u64, &[Projection::Query, Projection::Value]);
            c.prefix(dims, *prefix_len as u64, *prefix_placement);
        }
    }
    let total = c.per_point.values().sum();
    let percent = if *config == PeftConfig::FineTune { 100.0 } else { round3(total as f64 / base_total as f64 * 100.0) };
    Ok(CountBreakdown { per_point: c.per_point, total, percent })
}

/// The nine reference configurations with their published percentages.
pub fn reference_rows() -> Vec<(PeftConfig, f64)> {
    vec![
        (PeftConfig::FineTune, 100.0),
        (PeftConfig::prompt_tuning(50), 0.007),
        (PeftConfig::scaled_prompt_tuning(50), 0.007),
        (PeftConfig::adapter(16), 0.824),
        (PeftConfig::lora(8), 0.306),
        (PeftConfig::compacter(8, 16), 0.053),
        (PeftConfig::prefix_tuning(5), 0.096),
        (PeftConfig::IA3, 0.045),
        (PeftConfig::unipelt(16, 8, 5), 1.194),
    ]
}

/// Published percentage for configurations that appear in the reference table.
pub fn reported_percent(config: &PeftConfig) -> Option<f64> {
    match config {
        PeftConfig::PrefixTuning { len: 10, placement: PrefixPlacement::AllAttention } => Some(0.192),
        PeftConfig::UniPELT { adapter_reduction: 16, lora_rank: 8, prefix_len: 10, .. } => Some(1.258),
        other => reference_rows().into_iter().find(|(c, _)| c == other).map(|(_, p)| p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub method: String,
    pub config: PeftConfig,
    pub description: String,
    pub total: u64,
    pub percent: f64,
    pub reported_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditTable {
    pub base_total: u64,
    pub rows: Vec<AuditRow>,
}

pub fn audit_report(configs: &[PeftConfig], dims: &ArchitectureDims, base_total: u64) -> Result<AuditTable> {
    if configs.is_empty() {
        return Err(Error::config("audit needs at least one configuration"));
    }
    let rows = configs
        .iter()
        .map(|c| {
            let b = count_trainable(c, dims, base_total)?;
            Ok(AuditRow {
                method: c.label().to_string(),
                config: c.clone(),
                description: c.to_string(),
                total: b.total,
                percent: b.percent,
                reported_percent: reported_percent(c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditTable { base_total, rows })
}

impl AuditTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:<42} {:>12} {:>9} {:>9}", "method", "config", "trainable", "%", "reported");
        for r in &self.rows {
            let rep = r.reported_percent.map_or("-".to_string(), |p| format!("{p:.3}"));
            let flag = match r.reported_percent {
                Some(p) if (p - r.percent).abs() > 5e-4 => " *",
                _ => "",
            };
            let _ = writeln!(
                out,
                "{:<14} {:<42} {:>12} {:>9.3} {:>9}{flag}",
                r.method, r.description, r.total, r.percent, rep
            );
        }
        let _ = writeln!(out, "base total {}; * marks a computed value that differs from the reported one", self.base_total);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit rows serialize")
    }
}
