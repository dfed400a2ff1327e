//! Corpus-level n-gram generation metrics.
//!
//! Every metric tokenizes the same way: lowercase, punctuation split into
//! its own tokens, then whitespace.

mod bleu;
mod chrf;
mod cider;
mod nist;
mod rouge;
mod ter;

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use bleu::{corpus_bleu, corpus_bleu_smoothed, modified_precision};
pub use chrf::{chrf_pp, ngram_stats as chrf_ngram_stats};
pub use cider::{cider, cider_segments, CIDER_SIGMA};
pub use nist::nist;
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};
pub use ter::{ter, ter_edits, MAX_SHIFTS};

use crate::error::{Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Shape checks shared by every metric: equal lengths, non-empty reference sets.
pub(crate) fn check_corpus(metric: &str, cands: &[String], refs: &[Vec<String>]) -> Result<()> {
    if cands.len() != refs.len() {
        return Err(Error::contract(format!(
            "{metric}: {} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("{metric}: segment {i} has no references")));
    }
    Ok(())
}

pub(crate) fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if n == 0 || toks.len() < n {
        return m;
    }
    for w in toks.windows(n) {
        *m.entry(w.to_vec()).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub higher_is_better: bool,
    #[serde(default)]
    pub external: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scores: IndexMap<String, MetricScore>,
    pub candidates: usize,
    /// External metrics that were requested but unavailable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.scores.get(metric).map(|s| s.value)
    }

    pub fn insert(&mut self, metric: &str, value: f64, higher_is_better: bool) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: "metric_report", detail: format!("{metric} = {value}") });
        }
        self.scores.insert(metric.to_string(), MetricScore { value, higher_is_better, external: false });
        Ok(())
    }

    pub fn merge_external(&mut self, ext: &ExternalScores) {
        match ext {
            ExternalScores::Present(m) => {
                for (k, v) in m {
                    self.scores.insert(k.clone(), MetricScore { value: *v, higher_is_better: true, external: true });
                }
            }
            ExternalScores::Absent { path } => self.absent.push(path.clone()),
        }
    }
}

/// Scores of every built-in metric. CIDEr is omitted when the corpus holds
/// fewer than two distinct reference sets.
pub fn evaluate(cands: &[String], refs: &[Vec<String>]) -> Result<MetricReport> {
    check_corpus("evaluate", cands, refs)?;
    let mut r = MetricReport { candidates: cands.len(), ..Default::default() };
    r.insert("BLEU", corpus_bleu(cands, refs, 4)?, true)?;
    r.insert("chrF++", chrf_pp(cands, refs)?, true)?;
    r.insert("TER", ter(cands, refs)?, false)?;
    r.insert("ROUGE-L", rouge_l(cands, refs)?, true)?;
    r.insert("NIST", nist(cands, refs, 5)?, true)?;
    if let Ok(c) = cider(cands, refs, 4, CIDER_SIGMA) {
        r.insert("CIDEr", c, true)?;
    }
    Ok(r)
}

/// Scores produced by an outside tool.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalScores {
    Present(IndexMap<String, f64>),
    Absent { path: String },
}

/// Reads `{"metric": score, ...}`. A missing file is reported as absent.
pub fn external_scores(path: &Path) -> Result<ExternalScores> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(ExternalScores::Absent { path: path.display().to_string() })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let position = |e: &serde_json::Error| format!("{}:{}:{}", path.display(), e.line(), e.column());
    let raw: IndexMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::Parse { position: position(&e), detail: e.to_string() })?;
    let mut out = IndexMap::new();
    for (k, v) in raw {
        match v.as_f64() {
            Some(x) if x.is_finite() => {
                out.insert(k, x);
            }
            _ => {
                return Err(Error::Parse {
                    position: path.display().to_string(),
                    detail: format!("metric {k:?} has non-numeric value {v}"),
                })
            }
        }
    }
    Ok(ExternalScores::Present(out))
}
