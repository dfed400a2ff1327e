use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{linearize, sample_few_shot, Dataset, Instance, Scheme, Split, Vocab, DELIMITERS};
use crate::error::{Error, Result};
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::optim::Adam;
use crate::harness::spec::{ExperimentSpec, Shots};
use crate::metrics::{corpus_bleu, evaluate, MetricReport};
use crate::model::{ArchitectureDims, Seq2SeqModel, TokenBatch};
use crate::peft::{AttachedModel, PeftConfig};

/// Builds one vocabulary over the sources and references of every split of every dataset.
pub fn build_vocab(datasets: &[&Dataset]) -> Result<Vocab> {
    let mut texts = Vec::new();
    for d in datasets {
        for inst in &d.instances {
            texts.push(linearize(&inst.payload)?);
            texts.extend(inst.references.iter().cloned());
        }
    }
    Ok(Vocab::build(texts.iter().map(String::as_str), 1))
}

/// Configuration error if a reference uses a linearization delimiter as a word,
/// which would make it indistinguishable from structure in a shared vocabulary.
pub fn check_delimiters(dataset: &Dataset) -> Result<()> {
    for inst in &dataset.instances {
        for r in &inst.references {
            if let Some(d) = r.split_whitespace().find(|w| DELIMITERS.contains(w)) {
                return Err(Error::config(format!("instance {}: reference uses delimiter token {d}", inst.id)));
            }
        }
    }
    Ok(())
}

pub fn dims_for(spec: &ExperimentSpec, vocab: &Vocab) -> Result<ArchitectureDims> {
    let dims = ArchitectureDims::from_preset_or_json(&spec.model)?.with_vocab(vocab.len());
    dims.validate()?;
    Ok(dims)
}

/// Backbone named by `spec`: the fine-tuned checkpoint if given, else a seeded random init.
pub fn build_backbone(spec: &ExperimentSpec, vocab: &Vocab) -> Result<Seq2SeqModel<f32>> {
    let dims = dims_for(spec, vocab)?;
    match &spec.backbone {
        Some(path) => {
            let (model, manifest) = load_checkpoint::<f32>(path, None)?;
            if manifest.peft != PeftConfig::FineTune {
                return Err(Error::Load(format!("{} is not a fine-tuning checkpoint", path.display())));
            }
            manifest.check_compatible(&dims, &vocab.hash())?;
            Ok(model.into_parts().0)
        }
        None => Seq2SeqModel::new(dims, spec.backbone_seed),
    }
}

/// A spec with its data, vocabulary and initial backbone resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub backbone: Seq2SeqModel<f32>,
}

impl Experiment {
    /// Reads the dataset and builds the vocabulary from it alone.
    pub fn load(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let dataset = Dataset::load(&spec.dataset)?;
        let vocab = build_vocab(&[&dataset])?;
        Self::with_vocab(spec, dataset, vocab)
    }

    pub fn with_vocab(spec: ExperimentSpec, dataset: Dataset, vocab: Vocab) -> Result<Self> {
        let backbone = build_backbone(&spec, &vocab)?;
        Self::from_parts(spec, dataset, vocab, backbone)
    }

    pub fn from_parts(spec: ExperimentSpec, dataset: Dataset, vocab: Vocab, backbone: Seq2SeqModel<f32>) -> Result<Self> {
        spec.validate()?;
        if backbone.dims().vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "backbone vocabulary {} differs from corpus vocabulary {}",
                backbone.dims().vocab_size,
                vocab.len()
            )));
        }
        spec.peft.validate(backbone.dims())?;
        Ok(Self { spec, dataset, vocab, backbone })
    }

    pub(crate) fn task(&self) -> Task<'_> {
        Task { dataset: &self.dataset, scheme: self.spec.scheme, shots: self.spec.shots, dev_cap: self.spec.dev_cap, test_cap: self.spec.test_cap }
    }

    pub(crate) fn loop_config(&self) -> LoopConfig {
        LoopConfig::from_spec(&self.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Numeric breakdown at `step`: `loss` is `None` when the loss itself was
    /// non-finite, else the last finite loss before evaluation broke down.
    Diverged { step: usize, loss: Option<f64> },
}

/// Outcome of one (sampling repetition, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sampling_rep: usize,
    pub seed: usize,
    pub status: RunStatus,
    /// Maximum over `dev_curve`.
    pub best_dev_bleu: f64,
    pub best_step: usize,
    /// Test scores of the best-dev model; absent for diverged runs.
    pub test: Option<MetricReport>,
    /// Training loss after each step.
    pub losses: Vec<f64>,
    /// `(step, dev BLEU)` at every evaluation, starting at step 0.
    pub dev_curve: Vec<(usize, f64)>,
    pub train_pairs: usize,
    pub trainable_params: u64,
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Equality over every field except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }
}

/// A source dataset and how it enters a run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Task<'a> {
    pub dataset: &'a Dataset,
    pub scheme: Scheme,
    pub shots: Shots,
    pub dev_cap: usize,
    pub test_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LoopConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub target_dev_bleu: Option<f64>,
    pub max_decode_len: usize,
}

impl LoopConfig {
    pub fn from_spec(spec: &ExperimentSpec) -> Self {
        Self {
            lr: spec.effective_learning_rate(),
            max_steps: spec.max_steps,
            batch_size: spec.batch_size,
            eval_every: spec.eval_every,
            target_dev_bleu: spec.target_dev_bleu,
            max_decode_len: spec.max_decode_len,
        }
    }
}

/// Inputs and references scored by greedy decoding.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub inputs: Vec<Vec<usize>>,
    pub references: Vec<Vec<String>>,
}

impl EvalSet {
    pub fn from_instances(vocab: &Vocab, instances: &[&Instance]) -> Result<Self> {
        let mut set = Self::default();
        for inst in instances.iter().filter(|i| !i.references.is_empty()) {
            set.inputs.push(vocab.encode(&linearize(&inst.payload)?));
            set.references.push(inst.references.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn extend(&mut self, other: EvalSet) {
        self.inputs.extend(other.inputs);
        self.references.extend(other.references);
    }

    pub fn decode_all(&self, model: &AttachedModel<f32>, vocab: &Vocab, max_len: usize) -> Result<Vec<String>> {
        self.inputs
            .par_iter()
            .map(|enc| Ok(vocab.decode(&model.greedy_decode(enc, max_len)?)))
            .collect()
    }

    pub fn bleu(&self, model: &AttachedModel<f32>, vocab: &Vocab, max_len: usize) -> Result<f64> {
        corpus_bleu(&self.decode_all(model, vocab, max_len)?, &self.references, 4)
    }

    pub fn report(&self, model: &AttachedModel<f32>, vocab: &Vocab, max_len: usize) -> Result<MetricReport> {
        evaluate(&self.decode_all(model, vocab, max_len)?, &self.references)
    }
}

/// One `(source, target)` token pair per reference.
pub fn training_pairs(vocab: &Vocab, instances: &[Instance]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::new();
    for inst in instances {
        let src = vocab.encode(&linearize(&inst.payload)?);
        for r in &inst.references {
            out.push((src.clone(), vocab.encode(r)));
        }
    }
    Ok(out)
}

/// Seed of the few-shot draw for sampling repetition `rep`; independent of the training seed.
pub fn sampling_seed(rep: usize) -> u64 {
    0x5a4d_0000_0000 + rep as u64
}

/// Independent RNG streams of a run: 0 initializes method tensors, 1 orders batches.
pub(crate) fn run_rng(rep: usize, seed: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(((rep as u64) << 32) ^ seed as u64);
    rng.set_stream(stream);
    rng
}

pub(crate) fn select_train(task: &Task<'_>, rep: usize) -> Result<Vec<Instance>> {
    match task.shots {
        Shots::All => Ok(task.dataset.split(Split::Train).into_iter().cloned().collect()),
        Shots::PerStratum(n) => Ok(sample_few_shot(task.dataset, task.scheme, n, sampling_seed(rep))?.instances),
    }
}

pub(crate) fn dev_set(vocab: &Vocab, task: &Task<'_>) -> Result<EvalSet> {
    let dev = task.dataset.split(Split::Dev);
    let set = EvalSet::from_instances(vocab, &dev[..dev.len().min(task.dev_cap)])?;
    if set.is_empty() {
        return Err(Error::config("dataset has no dev instances with references for checkpoint selection"));
    }
    Ok(set)
}

pub(crate) fn test_set(vocab: &Vocab, task: &Task<'_>) -> Result<EvalSet> {
    let test = task.dataset.split(Split::Test);
    let cap = task.test_cap.unwrap_or(test.len()).min(test.len());
    EvalSet::from_instances(vocab, &test[..cap])
}

/// Training trace plus the model with the best dev score.
pub(crate) struct Trained {
    pub best: AttachedModel<f32>,
    pub status: RunStatus,
    pub best_dev_bleu: f64,
    pub best_step: usize,
    pub losses: Vec<f64>,
    pub dev_curve: Vec<(usize, f64)>,
}

/// Adam on the trainable tensors of `model`. Dev BLEU is measured before the
/// first step, every `eval_every` steps and after the last step; the best
/// model (earliest on ties) is kept.
pub(crate) fn train_loop(
    mut model: AttachedModel<f32>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    dev: &EvalSet,
    vocab: &Vocab,
    cfg: &LoopConfig,
    order_rng: &mut ChaCha8Rng,
) -> Result<Trained> {
    if pairs.is_empty() && cfg.max_steps > 0 {
        return Err(Error::config("no training pairs"));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut best_dev = dev.bleu(&model, vocab, cfg.max_decode_len)?;
    let mut dev_curve = vec![(0, best_dev)];
    let mut best_step = 0;
    let mut best = model.clone();
    let mut status = RunStatus::Completed;
    let reached = |b: f64| cfg.target_dev_bleu.is_some_and(|t| b >= t);
    let mut step = 0;
    while step < cfg.max_steps && !reached(best_dev) {
        if cursor >= order.len() {
            order.shuffle(order_rng);
            cursor = 0;
        }
        let take = cfg.batch_size.min(order.len() - cursor);
        let batch_pairs: Vec<(Vec<usize>, Vec<usize>)> = order[cursor..cursor + take].iter().map(|&i| pairs[i].clone()).collect();
        cursor += take;
        let batch = TokenBatch::from_pairs(&batch_pairs);
        step += 1;
        let loss = match model.accumulate_gradients(&batch) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::Numeric { .. }) => {
                status = RunStatus::Diverged { step, loss: None };
                break;
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        opt.begin_step();
        let (backbone, method) = model.stores_mut();
        opt.update(backbone);
        opt.update(method);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let b = match dev.bleu(&model, vocab, cfg.max_decode_len) {
                Ok(b) => b,
                Err(Error::Numeric { .. }) => {
                    status = RunStatus::Diverged { step, loss: Some(loss) };
                    break;
                }
                Err(e) => return Err(e),
            };
            dev_curve.push((step, b));
            if b > best_dev {
                best_dev = b;
                best_step = step;
                best = model.clone();
            }
        }
    }
    Ok(Trained { best, status, best_dev_bleu: best_dev, best_step, losses, dev_curve })
}

/// One run over one or more sources: train on the union of their train
/// selections, select on the union of their dev sets, and score each test set
/// separately. `start` replaces a freshly attached model.
pub(crate) fn run_cell(
    backbone: &Seq2SeqModel<f32>,
    peft: &PeftConfig,
    vocab: &Vocab,
    tasks: &[Task<'_>],
    cfg: &LoopConfig,
    start: Option<AttachedModel<f32>>,
    rep: usize,
    seed: usize,
) -> Result<(Vec<RunResult>, AttachedModel<f32>)> {
    let started = Instant::now();
    let model = match start {
        Some(m) => m,
        None => AttachedModel::attach(backbone.clone(), peft.clone(), &mut run_rng(rep, seed, 0))?,
    };
    let mut train = Vec::new();
    let mut dev = EvalSet::default();
    for t in tasks {
        train.extend(select_train(t, rep)?);
        dev.extend(dev_set(vocab, t)?);
    }
    let pairs = training_pairs(vocab, &train)?;
    let trainable_params = model.trainable_count();
    let trained = train_loop(model, &pairs, &dev, vocab, cfg, &mut run_rng(rep, seed, 1))?;
    let mut results = Vec::with_capacity(tasks.len());
    for t in tasks {
        let test = if trained.status == RunStatus::Completed {
            let set = test_set(vocab, t)?;
            if set.is_empty() {
                None
            } else {
                Some(set.report(&trained.best, vocab, cfg.max_decode_len)?)
            }
        } else {
            None
        };
        results.push(RunResult {
            sampling_rep: rep,
            seed,
            status: trained.status.clone(),
            best_dev_bleu: trained.best_dev_bleu,
            best_step: trained.best_step,
            test,
            losses: trained.losses.clone(),
            dev_curve: trained.dev_curve.clone(),
            train_pairs: pairs.len(),
            trainable_params,
            wall_time_secs: 0.0,
        });
    }
    let elapsed = started.elapsed().as_secs_f64();
    results.iter_mut().for_each(|r| r.wall_time_secs = elapsed);
    Ok((results, trained.best))
}

/// Trains one cell of `exp` and returns its result with the best-dev model.
pub fn train_run_with_model(exp: &Experiment, sampling_rep: usize, seed: usize) -> Result<(RunResult, AttachedModel<f32>)> {
    let (mut results, best) = run_cell(&exp.backbone, &exp.spec.peft, &exp.vocab, &[exp.task()], &exp.loop_config(), None, sampling_rep, seed)?;
    Ok((results.remove(0), best))
}

pub fn train_run(exp: &Experiment, sampling_rep: usize, seed: usize) -> Result<RunResult> {
    Ok(train_run_with_model(exp, sampling_rep, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::restaurant_corpus;

    fn experiment(peft: PeftConfig, steps: usize) -> Experiment {
        let data = restaurant_corpus(24, 6, 6, 1);
        let vocab = build_vocab(&[&data]).unwrap();
        let mut spec = ExperimentSpec::new("synthetic", Scheme::SlotCount, Shots::PerStratum(2), peft);
        spec.model = "tiny".into();
        spec.max_steps = steps;
        spec.eval_every = 5;
        spec.max_decode_len = 12;
        Experiment::with_vocab(spec, data, vocab).unwrap()
    }

    #[test]
    fn run_is_deterministic_and_records_curve() {
        let exp = experiment(PeftConfig::lora(2), 10);
        let a = train_run(&exp, 1, 2).unwrap();
        let b = train_run(&exp, 1, 2).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(a.losses.len(), 10);
        assert_eq!(a.dev_curve.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![0, 5, 10]);
        let max = a.dev_curve.iter().map(|(_, b)| *b).fold(f64::MIN, f64::max);
        assert_eq!(a.best_dev_bleu, max);
        assert!(a.test.is_some());
    }

    #[test]
    fn huge_learning_rate_is_reported_not_raised() {
        let mut exp = experiment(PeftConfig::FineTune, 30);
        exp.spec.learning_rate = Some(1e30);
        let r = train_run(&exp, 0, 0).unwrap();
        assert!(matches!(r.status, RunStatus::Diverged { .. }));
        assert!(r.test.is_none());
    }
}
