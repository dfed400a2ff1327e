use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::run::{build_backbone, build_vocab, check_delimiters, dev_set, run_cell, test_set, Experiment, RunResult};
use crate::harness::spec::ExperimentSpec;
use crate::metrics::MetricReport;
use crate::peft::PeftConfig;

/// Environment variable bounding how many runs execute at once.
pub const WORKERS_ENV: &str = "PEFTFORGE_WORKERS";

/// Key under which the best dev BLEU is aggregated next to test metrics.
pub const DEV_BLEU_KEY: &str = "dev_BLEU";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single run.
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(Self { mean, stderr, n })
    }
}

/// Runs of one grid and per-metric aggregates over the completed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub label: String,
    pub runs: Vec<RunResult>,
    pub completed: usize,
    pub failed: usize,
    pub summary: IndexMap<String, MeanStderr>,
}

impl GridReport {
    /// Aggregates `runs`. Diverged runs are counted but excluded from the means.
    pub fn from_runs(label: impl Into<String>, runs: Vec<RunResult>) -> Result<Self> {
        let label = label.into();
        let done: Vec<&RunResult> = runs.iter().filter(|r| r.is_completed()).collect();
        if done.is_empty() {
            return Err(Error::Grid(format!("{label}: all {} runs failed", runs.len())));
        }
        let mut values: IndexMap<String, Vec<f64>> = IndexMap::new();
        values.insert(DEV_BLEU_KEY.to_string(), done.iter().map(|r| r.best_dev_bleu).collect());
        for r in &done {
            if let Some(t) = &r.test {
                for (k, s) in &t.scores {
                    values.entry(k.clone()).or_default().push(s.value);
                }
            }
        }
        let summary = values.into_iter().filter_map(|(k, v)| MeanStderr::of(&v).map(|m| (k, m))).collect();
        Ok(Self { label, completed: done.len(), failed: runs.len() - done.len(), runs, summary })
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|m| m.mean)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}: {} runs ({} completed, {} failed)\n", self.label, self.runs.len(), self.completed, self.failed);
        for (k, m) in &self.summary {
            s.push_str(&format!("  {k:<10} {:>9.4} ± {:.4}  (n={})\n", m.mean, m.stderr, m.n));
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_jsonl(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in runs {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunResult>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { position: format!("line {}", i + 1), detail: e.to_string() })?);
    }
    Ok(out)
}

/// Writes `results.jsonl` and `grid.json` for `report` under `dir/name`.
pub fn persist(dir: &Path, name: &str, report: &GridReport) -> Result<PathBuf> {
    let out = dir.join(name);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_jsonl(&out.join("results.jsonl"), &report.runs)?;
    report.write_json(&out.join("grid.json"))?;
    Ok(out)
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Runs `job` over every `(rep, seed)` cell on a bounded pool; results keep rep-major order.
fn run_cells<R: Send>(reps: usize, seeds: usize, job: impl Fn(usize, usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let cells: Vec<(usize, usize)> = (0..reps).flat_map(|r| (0..seeds).map(move |s| (r, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&(r, s)| job(r, s)).collect())
}

fn label(spec: &ExperimentSpec) -> String {
    format!("{} [{}] on {}", spec.peft.label(), spec.peft, spec.dataset.display())
}

/// `sampling_reps × seeds` independent runs, aggregated.
pub fn run_grid(exp: &Experiment) -> Result<GridReport> {
    let cfg = exp.loop_config();
    let task = exp.task();
    let runs = run_cells(exp.spec.sampling_reps, exp.spec.seeds, |r, s| {
        Ok(run_cell(&exp.backbone, &exp.spec.peft, &exp.vocab, &[task], &cfg, None, r, s)?.0.remove(0))
    })?;
    let report = GridReport::from_runs(label(&exp.spec), runs)?;
    if let Some(dir) = &exp.spec.output_dir {
        persist(dir, "grid", &report)?;
    }
    Ok(report)
}

/// Two experiments sharing one vocabulary and one backbone.
#[derive(Debug, Clone)]
pub struct PairedExperiment {
    pub first: Experiment,
    pub second: Experiment,
}

impl PairedExperiment {
    /// Loads both datasets and builds the backbone over their joint vocabulary.
    pub fn load(first: ExperimentSpec, second: ExperimentSpec) -> Result<Self> {
        let a = Dataset::load(&first.dataset)?;
        let b = Dataset::load(&second.dataset)?;
        Self::from_datasets(first, a, second, b)
    }

    pub fn from_datasets(first: ExperimentSpec, a: Dataset, second: ExperimentSpec, b: Dataset) -> Result<Self> {
        if first.peft != second.peft || first.model != second.model || first.backbone != second.backbone || first.backbone_seed != second.backbone_seed {
            return Err(Error::config("paired experiments must share the method, model and backbone"));
        }
        check_delimiters(&a)?;
        check_delimiters(&b)?;
        let vocab = build_vocab(&[&a, &b])?;
        let backbone = build_backbone(&first, &vocab)?;
        Ok(Self {
            first: Experiment::from_parts(first, a, vocab.clone(), backbone.clone())?,
            second: Experiment::from_parts(second, b, vocab, backbone)?,
        })
    }
}

/// One model per cell trained on the mixed few-shot samples of both datasets
/// and scored on each test split separately. Hyperparameters come from the first spec.
pub fn multi_task_run(pair: &PairedExperiment) -> Result<(GridReport, GridReport)> {
    let (a, b) = (&pair.first, &pair.second);
    if a.spec.shots != b.spec.shots {
        return Err(Error::config("multi-task mixing needs the same shot count for both datasets"));
    }
    let cfg = a.loop_config();
    let tasks = [a.task(), b.task()];
    let runs = run_cells(a.spec.sampling_reps, a.spec.seeds, |r, s| {
        Ok(run_cell(&a.backbone, &a.spec.peft, &a.vocab, &tasks, &cfg, None, r, s)?.0)
    })?;
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    for mut pair_runs in runs {
        rb.push(pair_runs.pop().expect("two tasks"));
        ra.push(pair_runs.pop().expect("two tasks"));
    }
    let ga = GridReport::from_runs(format!("multi-task {}", label(&a.spec)), ra)?;
    let gb = GridReport::from_runs(format!("multi-task {}", label(&b.spec)), rb)?;
    if let Some(dir) = &a.spec.output_dir {
        persist(dir, "multitask_first", &ga)?;
        persist(dir, "multitask_second", &gb)?;
    }
    Ok((ga, gb))
}

/// Stage-1 checkpoint scored on the second dataset before any stage-2 step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub sampling_rep: usize,
    pub seed: usize,
    pub dev_bleu: f64,
    pub test: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateReport {
    pub stage1: GridReport,
    pub zero_shot: Vec<ZeroShot>,
    pub stage2: GridReport,
}

/// Sequential transfer: train on the first dataset, checkpoint the best model,
/// score it zero-shot on the second, then continue training on the second.
/// Cells follow the second spec's repetition counts.
pub fn intermediate_run(pair: &PairedExperiment) -> Result<IntermediateReport> {
    let (a, b) = (&pair.first, &pair.second);
    let (cfg_a, cfg_b) = (a.loop_config(), b.loop_config());
    let (task_a, task_b) = (a.task(), b.task());
    let scratch = b
        .spec
        .output_dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("peft-forge-intermediate-{}", std::process::id())));
    let cells = run_cells(b.spec.sampling_reps, b.spec.seeds, |r, s| {
        let (mut stage1, best) = run_cell(&a.backbone, &a.spec.peft, &a.vocab, &[task_a], &cfg_a, None, r, s)?;
        let dir = scratch.join(format!("stage1_rep{r}_seed{s}"));
        save_checkpoint(&best, &a.vocab.hash(), stage1[0].best_step, stage1[0].best_dev_bleu, &dir)?;
        let (loaded, manifest) = load_checkpoint(&dir, Some(a.backbone.clone()))?;
        manifest.check_compatible(b.backbone.dims(), &b.vocab.hash())?;
        let dev_bleu = dev_set(&b.vocab, &task_b)?.bleu(&loaded, &b.vocab, cfg_b.max_decode_len)?;
        let tests = test_set(&b.vocab, &task_b)?;
        let test = if tests.is_empty() { None } else { Some(tests.report(&loaded, &b.vocab, cfg_b.max_decode_len)?) };
        let (mut stage2, _) = run_cell(&b.backbone, &b.spec.peft, &b.vocab, &[task_b], &cfg_b, Some(loaded), r, s)?;
        if b.spec.output_dir.is_none() {
            let _ = std::fs::remove_dir_all(&dir);
        }
        Ok((stage1.remove(0), ZeroShot { sampling_rep: r, seed: s, dev_bleu, test }, stage2.remove(0)))
    })?;
    if b.spec.output_dir.is_none() {
        let _ = std::fs::remove_dir(&scratch);
    }
    let mut s1 = Vec::new();
    let mut zero_shot = Vec::new();
    let mut s2 = Vec::new();
    for (x, z, y) in cells {
        s1.push(x);
        zero_shot.push(z);
        s2.push(y);
    }
    let report = IntermediateReport {
        stage1: GridReport::from_runs(format!("stage 1 {}", label(&a.spec)), s1)?,
        zero_shot,
        stage2: GridReport::from_runs(format!("stage 2 {}", label(&b.spec)), s2)?,
    };
    if let Some(dir) = &b.spec.output_dir {
        persist(dir, "intermediate_stage2", &report.stage2)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub length: usize,
    pub trainable_params: u64,
    pub bleu: Option<MeanStderr>,
    pub ter: Option<MeanStderr>,
    pub grid: GridReport,
}

/// Lengths swept by default.
pub const SWEEP_LENGTHS: [usize; 4] = [10, 30, 50, 60];

/// One grid per soft-prompt length.
pub fn prompt_length_sweep(exp: &Experiment, lengths: &[usize]) -> Result<Vec<SweepPoint>> {
    let with_len = |k: usize| match &exp.spec.peft {
        PeftConfig::PromptTuning { .. } => Ok(PeftConfig::PromptTuning { k }),
        PeftConfig::ScaledPromptTuning { scale_shape, .. } => Ok(PeftConfig::ScaledPromptTuning { k, scale_shape: *scale_shape }),
        other => Err(Error::config(format!("prompt-length sweep needs a prompt method, got {}", other.label()))),
    };
    let mut points = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut spec = exp.spec.clone();
        spec.peft = with_len(len)?;
        spec.output_dir = exp.spec.output_dir.as_ref().map(|d| d.join(format!("len{len}")));
        let e = Experiment::from_parts(spec, exp.dataset.clone(), exp.vocab.clone(), exp.backbone.clone())?;
        let grid = run_grid(&e)?;
        let trainable_params = grid.runs[0].trainable_params;
        points.push(SweepPoint {
            length: len,
            trainable_params,
            bleu: grid.summary.get("BLEU").copied(),
            ter: grid.summary.get("TER").copied(),
            grid,
        });
    }
    Ok(points)
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let fmt = |m: &Option<MeanStderr>| m.map_or("-".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.stderr));
    let mut s = format!("{:>6}  {:>10}  {:>16}  {:>16}\n", "length", "params", "BLEU", "TER");
    for p in points {
        s.push_str(&format!("{:>6}  {:>10}  {:>16}  {:>16}\n", p.length, p.trainable_params, fmt(&p.bleu), fmt(&p.ter)));
    }
    s
}
