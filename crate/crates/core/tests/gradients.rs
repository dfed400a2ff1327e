mod common;

use common::{attached, random_batch, rng, tiny_roster};
use peft_forge::gradcheck::grad_check;
use peft_forge::model::{ArchitectureDims, Seq2SeqModel};
use peft_forge::peft::{PeftConfig, PeftHooks};
use peft_forge::Attached64;
use rand::Rng;

const TOL: f64 = 1e-5;

/// Moves every method tensor off its initial value so zero-initialized
/// factors (LoRA B, adapter up, gates) carry non-trivial gradients.
fn jitter(model: &mut Attached64, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in model.method_params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn every_method_passes_end_to_end_grad_check() {
    let dims = ArchitectureDims::tiny();
    for (i, config) in tiny_roster().into_iter().enumerate() {
        let mut model: Attached64 = attached(dims.clone(), config.clone(), 10 + i as u64);
        jitter(&mut model, 99 + i as u64);
        let batch = random_batch(&mut rng(i as u64), dims.vocab_size, 2);
        let report = if config == PeftConfig::FineTune {
            let mut store = model.backbone().params().clone();
            grad_check(&mut store, 1e-6, |g, s| {
                let m = Seq2SeqModel::from_params(dims.clone(), s.clone())?;
                m.teacher_forced_loss(g, &batch, PeftHooks::none())
            })
            .unwrap()
        } else {
            let mut store = model.method_params().clone();
            let backbone = model.backbone();
            let table = model.hook_table();
            grad_check(&mut store, 1e-6, |g, s| backbone.teacher_forced_loss(g, &batch, PeftHooks::new(table, s))).unwrap()
        };
        assert!(!report.per_param.is_empty());
        let worst = report.worst().unwrap();
        assert!(report.max_rel_err() < TOL, "{}: {} has rel err {}", config.label(), worst.0, worst.1);
    }
}

#[test]
fn unipelt_gradients_reach_all_parts() {
    let dims = ArchitectureDims::tiny();
    let mut model: Attached64 = attached(dims.clone(), PeftConfig::unipelt(2, 2, 2), 5);
    jitter(&mut model, 6);
    let batch = random_batch(&mut rng(7), dims.vocab_size, 3);
    model.accumulate_gradients(&batch).unwrap();
    for (name, t) in model.method_params().iter() {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|v| *v != 0.0), "{name} gradient is all zero");
    }
}
