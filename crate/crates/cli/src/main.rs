use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use peft_forge::audit::{audit_report, reference_rows, REFERENCE_BASE_TOTAL};
use peft_forge::data::synthetic::{knowledge_graph_corpus, restaurant_corpus, restaurant_style_corpus};
use peft_forge::data::{linearize, sample_few_shot, Dataset, Scheme, Split};
use peft_forge::harness::{
    intermediate_run, multi_task_run, prompt_length_sweep, read_jsonl, run_grid, save_checkpoint, sweep_table, train_run_with_model,
    Experiment, ExperimentSpec, GridReport, PairedExperiment, SWEEP_LENGTHS,
};
use peft_forge::metrics::{evaluate, external_scores};
use peft_forge::model::ArchitectureDims;
use peft_forge::peft::PeftConfig;

#[derive(Parser)]
#[command(name = "peft-forge", version, about = "Parameter-efficient fine-tuning experiments for data-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Restaurant,
    RestaurantStyle,
    KnowledgeGraph,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form trainable-parameter counts and percentages.
    CountParams {
        /// Preset name (t5_large, toy, tiny) or dims JSON.
        #[arg(long, default_value = "t5_large")]
        model: String,
        #[arg(long, default_value_t = REFERENCE_BASE_TOTAL)]
        base: u64,
        /// Method config as JSON, e.g. '{"method":"LoRA","rank":8}'. Repeatable; defaults to the reference roster.
        #[arg(long = "config")]
        configs: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Print the linearized source of every instance as `id<TAB>text`.
    Linearize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Stratified few-shot draw from the train split, written as canonical JSON.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates against one or more reference streams (one segment per line).
    Eval {
        #[arg(long)]
        cands: PathBuf,
        /// Reference file; repeat for multiple references per segment.
        #[arg(long = "refs", required = true)]
        refs: Vec<PathBuf>,
        /// JSON object of scores from an external tool.
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Write a synthetic corpus as canonical JSON.
    Synth {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        dev: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        rep: usize,
        #[arg(long, default_value_t = 0)]
        seed: usize,
        /// Directory for the best-dev checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// All sampling repetitions × seeds of one spec.
    Grid {
        #[arg(long)]
        spec: PathBuf,
    },
    /// One model on the mixture of two datasets.
    Multitask {
        #[arg(long)]
        spec_a: PathBuf,
        #[arg(long)]
        spec_b: PathBuf,
    },
    /// Train on the first dataset, then continue on the second.
    Intermediate {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
    },
    /// One grid per soft-prompt length.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LENGTHS)]
        lengths: Vec<usize>,
    },
    /// Aggregate a results file written by a grid.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "results")]
        label: String,
        #[arg(long)]
        json: bool,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_grid(report: &GridReport) {
    print!("{}", report.to_text());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::CountParams { model, base, configs, json } => {
            let dims = ArchitectureDims::from_preset_or_json(&model)?;
            let configs: Vec<PeftConfig> = if configs.is_empty() {
                reference_rows().into_iter().map(|(c, _)| c).collect()
            } else {
                configs.iter().map(|c| serde_json::from_str(c).with_context(|| format!("config {c}"))).collect::<Result<_>>()?
            };
            let table = audit_report(&configs, &dims, base)?;
            if json {
                println!("{}", table.to_json());
            } else {
                print!("{}", table.to_text());
            }
        }
        Command::Linearize { input, split } => {
            let data = Dataset::load(&input)?;
            let split: Option<Split> = split.map(|s| s.parse()).transpose()?;
            let mut out = std::io::stdout().lock();
            for inst in data.instances.iter().filter(|i| split.is_none_or(|s| i.split == s)) {
                writeln!(out, "{}\t{}", inst.id, linearize(&inst.payload)?)?;
            }
        }
        Command::Sample { input, scheme, shots, seed, out } => {
            let data = Dataset::load(&input)?;
            let scheme: Scheme = scheme.parse()?;
            let sample = sample_few_shot(&data, scheme, shots, seed)?;
            for s in &sample.shortfalls {
                eprintln!("stratum {}: requested {}, only {} available", s.stratum, s.requested, s.available);
            }
            for (stratum, n) in sample.per_stratum(scheme) {
                eprintln!("{stratum}\t{n}");
            }
            Dataset::new(sample.instances)?.export_canonical_json(&out)?;
        }
        Command::Eval { cands, refs, external } => {
            let cands = read_lines(&cands)?;
            let streams: Vec<Vec<String>> = refs.iter().map(|p| read_lines(p)).collect::<Result<_>>()?;
            if let Some(bad) = streams.iter().position(|s| s.len() != cands.len()) {
                bail!("{} has {} lines, candidates have {}", refs[bad].display(), streams[bad].len(), cands.len());
            }
            let refs: Vec<Vec<String>> = (0..cands.len()).map(|i| streams.iter().map(|s| s[i].clone()).collect()).collect();
            let mut report = evaluate(&cands, &refs)?;
            if let Some(path) = external {
                report.merge_external(&external_scores(&path)?);
            }
            print_json(&report)?;
        }
        Command::Synth { kind, train, dev, test, seed, out } => {
            let data = match kind {
                CorpusKind::Restaurant => restaurant_corpus(train, dev, test, seed),
                CorpusKind::RestaurantStyle => restaurant_style_corpus(train, seed),
                CorpusKind::KnowledgeGraph => knowledge_graph_corpus(train, dev, test, seed),
            };
            data.export_canonical_json(&out)?;
            eprintln!("wrote {} instances to {}", data.len(), out.display());
        }
        Command::Train { spec, rep, seed, checkpoint } => {
            let exp = Experiment::load(ExperimentSpec::load(&spec)?)?;
            let (result, best) = train_run_with_model(&exp, rep, seed)?;
            if let Some(dir) = checkpoint {
                save_checkpoint(&best, &exp.vocab.hash(), result.best_step, result.best_dev_bleu, &dir)?;
                eprintln!("checkpoint written to {}", dir.display());
            }
            print_json(&result)?;
        }
        Command::Grid { spec } => {
            let exp = Experiment::load(ExperimentSpec::load(&spec)?)?;
            print_grid(&run_grid(&exp)?);
        }
        Command::Multitask { spec_a, spec_b } => {
            let pair = PairedExperiment::load(ExperimentSpec::load(&spec_a)?, ExperimentSpec::load(&spec_b)?)?;
            let (a, b) = multi_task_run(&pair)?;
            print_grid(&a);
            print_grid(&b);
        }
        Command::Intermediate { first, second } => {
            let pair = PairedExperiment::load(ExperimentSpec::load(&first)?, ExperimentSpec::load(&second)?)?;
            let report = intermediate_run(&pair)?;
            print_grid(&report.stage1);
            for z in &report.zero_shot {
                println!("zero-shot rep {} seed {}: dev BLEU {:.4}", z.sampling_rep, z.seed, z.dev_bleu);
            }
            print_grid(&report.stage2);
        }
        Command::Sweep { spec, lengths } => {
            let exp = Experiment::load(ExperimentSpec::load(&spec)?)?;
            let points = prompt_length_sweep(&exp, &lengths)?;
            print!("{}", sweep_table(&points));
        }
        Command::Report { input, label, json } => {
            let report = GridReport::from_runs(label, read_jsonl(&input)?)?;
            if json {
                print_json(&report)?;
            } else {
                print_grid(&report);
            }
        }
    }
    Ok(())
}
