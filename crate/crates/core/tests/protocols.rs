mod common;

use peft_forge::data::synthetic::{knowledge_graph_corpus, restaurant_corpus};
use peft_forge::data::{linearize, Dataset, Scheme, Vocab};
use peft_forge::harness::{
    build_vocab, intermediate_run, multi_task_run, prompt_length_sweep, run_grid, train_run, training_pairs, Adam, Experiment,
    ExperimentSpec, PairedExperiment, Shots, DEV_BLEU_KEY,
};
use peft_forge::model::{ArchitectureDims, Seq2SeqModel, TokenBatch};
use peft_forge::peft::{AttachedModel, PeftConfig};
use peft_forge::Error;

fn spec(name: &str, scheme: Scheme, peft: PeftConfig, steps: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(name, scheme, Shots::PerStratum(2), peft);
    s.model = "tiny".into();
    s.max_steps = steps;
    s.eval_every = 4;
    s.dev_cap = 6;
    s.test_cap = Some(6);
    s.max_decode_len = 10;
    s.learning_rate = Some(1e-2);
    s
}

fn restaurant_experiment(peft: PeftConfig, steps: usize) -> Experiment {
    let data = restaurant_corpus(40, 8, 8, 3);
    let vocab = build_vocab(&[&data]).unwrap();
    Experiment::with_vocab(spec("restaurant", Scheme::SlotCount, peft, steps), data, vocab).unwrap()
}

#[test]
fn default_grid_is_nine_reproducible_runs() {
    let exp = restaurant_experiment(PeftConfig::scaled_prompt_tuning(4), 8);
    let a = run_grid(&exp).unwrap();
    assert_eq!(a.runs.len(), 9);
    assert_eq!((a.completed, a.failed), (9, 0));
    let keys: Vec<(usize, usize)> = a.runs.iter().map(|r| (r.sampling_rep, r.seed)).collect();
    assert_eq!(keys, (0..3).flat_map(|r| (0..3).map(move |s| (r, s))).collect::<Vec<_>>());
    let b = run_grid(&exp).unwrap();
    assert_eq!(a.summary, b.summary);
    assert!(a.runs.iter().zip(&b.runs).all(|(x, y)| x.same_outcome(y)));
    assert_eq!(a.summary[DEV_BLEU_KEY].n, 9);
    assert!(a.summary.contains_key("BLEU") && a.summary.contains_key("TER"));
}

#[test]
fn single_cell_grid_equals_its_run() {
    let mut exp = restaurant_experiment(PeftConfig::lora(2), 4);
    exp.spec.sampling_reps = 1;
    exp.spec.seeds = 1;
    let g = run_grid(&exp).unwrap();
    let r = train_run(&exp, 0, 0).unwrap();
    assert!(g.runs[0].same_outcome(&r));
    let bleu = g.summary["BLEU"];
    assert_eq!(bleu.mean, r.test.as_ref().unwrap().get("BLEU").unwrap());
    assert_eq!(bleu.stderr, 0.0);
}

#[test]
fn multi_task_mixes_both_samples_and_reports_each() {
    let a = restaurant_corpus(40, 8, 8, 3);
    let b = knowledge_graph_corpus(40, 8, 8, 4);
    let mut sa = spec("restaurant", Scheme::SlotCount, PeftConfig::prompt_tuning(4), 4);
    let mut sb = spec("kg", Scheme::Category, PeftConfig::prompt_tuning(4), 4);
    sa.sampling_reps = 1;
    sb.sampling_reps = 1;
    let pair = PairedExperiment::from_datasets(sa, a.clone(), sb, b.clone()).unwrap();
    let (ra, rb) = multi_task_run(&pair).unwrap();
    assert_eq!((ra.runs.len(), rb.runs.len()), (3, 3));
    let strata = |d: &Dataset| d.instances.iter().map(|i| i.stratum.clone()).collect::<std::collections::BTreeSet<_>>().len();
    // Synthetic instances carry one reference, so pairs equal instances.
    assert_eq!(ra.runs[0].train_pairs, 2 * (strata(&a) + strata(&b)));
    assert_ne!(ra.runs[0].test, rb.runs[0].test);

    let mut mismatched = spec("kg", Scheme::Category, PeftConfig::prompt_tuning(4), 4);
    mismatched.shots = Shots::PerStratum(3);
    let bad = PairedExperiment::from_datasets(spec("r", Scheme::SlotCount, PeftConfig::prompt_tuning(4), 4), a, mismatched, b).unwrap();
    assert!(matches!(multi_task_run(&bad), Err(Error::Config(_))));
}

#[test]
fn delimiter_words_in_references_are_rejected() {
    let mut a = restaurant_corpus(4, 2, 2, 3);
    a.instances[0].references[0].push_str(" <S>");
    let b = knowledge_graph_corpus(4, 2, 2, 4);
    let s = || spec("x", Scheme::Category, PeftConfig::IA3, 1);
    assert!(matches!(PairedExperiment::from_datasets(s(), a, s(), b), Err(Error::Config(_))));
}

#[test]
fn intermediate_stage_two_starts_from_zero_shot_score() {
    let a = knowledge_graph_corpus(40, 8, 8, 4);
    let b = restaurant_corpus(40, 8, 8, 3);
    let mut sa = spec("kg", Scheme::Category, PeftConfig::lora(2), 8);
    let mut sb = spec("restaurant", Scheme::SlotCount, PeftConfig::lora(2), 8);
    sa.sampling_reps = 1;
    sb.sampling_reps = 1;
    sb.seeds = 2;
    let pair = PairedExperiment::from_datasets(sa.clone(), a.clone(), sb.clone(), b.clone()).unwrap();
    let rep = intermediate_run(&pair).unwrap();
    assert_eq!(rep.zero_shot.len(), 2);
    for (z, run) in rep.zero_shot.iter().zip(&rep.stage2.runs) {
        assert_eq!(run.dev_curve[0], (0, z.dev_bleu));
    }

    // A stage 1 without steps hands over the freshly attached model.
    sa.max_steps = 0;
    let pair = PairedExperiment::from_datasets(sa, a, sb, b).unwrap();
    let rep = intermediate_run(&pair).unwrap();
    let plain = run_grid(&pair.second).unwrap();
    assert!(rep.stage2.runs.iter().zip(&plain.runs).all(|(x, y)| x.same_outcome(y)));
}

#[test]
fn sweep_runs_one_grid_per_length() {
    let mut exp = restaurant_experiment(PeftConfig::scaled_prompt_tuning(1), 2);
    exp.spec.sampling_reps = 1;
    exp.spec.seeds = 1;
    let points = prompt_length_sweep(&exp, &[2, 4, 6, 8]).unwrap();
    assert_eq!(points.len(), 4);
    let d = exp.backbone.dims().d_model as u64;
    for p in &points {
        assert_eq!(p.trainable_params, p.length as u64 * d + p.length as u64);
        assert!(p.bleu.is_some() && p.ter.is_some());
    }
    let again = prompt_length_sweep(&exp, &[2]).unwrap();
    assert_eq!(again[0].grid.summary, points[0].grid.summary);
    // Prompt plus source must fit the position table.
    assert!(matches!(prompt_length_sweep(&exp, &[60]), Err(Error::Config(_))));
    let lora = restaurant_experiment(PeftConfig::lora(2), 2);
    assert!(matches!(prompt_length_sweep(&lora, &[10]), Err(Error::Config(_))));
}

#[test]
fn toy_fine_tuning_overfits_eight_instances() {
    let data = restaurant_corpus(8, 0, 0, 9);
    let vocab = Vocab::build(
        data.instances.iter().flat_map(|i| [linearize(&i.payload).unwrap(), i.references[0].clone()]).collect::<Vec<_>>().iter().map(String::as_str),
        1,
    );
    let pairs = training_pairs(&vocab, &data.instances).unwrap();
    let batch = TokenBatch::from_pairs(&pairs);
    let bb = Seq2SeqModel::new(ArchitectureDims::toy(vocab.len()), 0).unwrap();
    let mut model: AttachedModel<f32> = AttachedModel::attach(bb, PeftConfig::FineTune, &mut common::rng(0)).unwrap();
    let mut opt = Adam::new(1e-3);
    let mut last = f64::INFINITY;
    for _ in 0..2000 {
        last = model.accumulate_gradients(&batch).unwrap();
        if last < 0.1 {
            break;
        }
        opt.begin_step();
        let (b, m) = model.stores_mut();
        opt.update(b);
        opt.update(m);
    }
    assert!(last < 0.1, "loss {last}");
    let out = model.greedy_decode(&pairs[0].0, 64).unwrap();
    assert_eq!(vocab.decode(&out), data.instances[0].references[0]);
}
