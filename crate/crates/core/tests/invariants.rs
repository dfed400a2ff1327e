mod common;

use common::{attached, random_batch, rng, tiny_roster};
use peft_forge::autodiff::Graph;
use peft_forge::harness::{load_checkpoint, save_checkpoint, Adam};
use peft_forge::model::ArchitectureDims;
use peft_forge::peft::ops::{compose_prompt, compose_scaled_prompt};
use peft_forge::peft::{PeftConfig, PeftHooks, ScaleShape};
use peft_forge::tensor::Tensor;
use peft_forge::{Attached32, Attached64};
use rand::Rng;

fn train_steps(model: &mut Attached32, steps: usize, seed: u64) {
    let mut opt = Adam::new(1e-2);
    let mut r = rng(seed);
    let vocab = model.dims().vocab_size;
    for _ in 0..steps {
        let batch = random_batch(&mut r, vocab, 2);
        model.accumulate_gradients(&batch).unwrap();
        opt.begin_step();
        let (bb, m) = model.stores_mut();
        opt.update(bb);
        opt.update(m);
    }
}

#[test]
fn scaled_prompt_with_unit_scale_is_bitwise_plain_prompt() {
    let mut r = rng(1);
    let prompt = Tensor::<f64>::from_fn(&[4, 6], |_| r.random_range(-2.0..2.0));
    let emb = Tensor::<f64>::from_fn(&[5, 6], |_| r.random_range(-2.0..2.0));
    for (shape, dims) in [(ScaleShape::Vector, [4, 1]), (ScaleShape::Scalar, [1, 1]), (ScaleShape::Matrix, [4, 6])] {
        let mut g = Graph::new();
        let (p, e, s) = (g.leaf(&prompt).unwrap(), g.leaf(&emb).unwrap(), g.leaf(&Tensor::ones(&dims)).unwrap());
        let a = compose_prompt(&mut g, p, e).unwrap();
        let b = compose_scaled_prompt(&mut g, p, s, shape, e).unwrap();
        assert!(g.tensor(a).bit_eq(&g.tensor(b)), "{shape:?}");
    }
}

#[test]
fn spt_model_with_unit_scale_matches_pt_model_bitwise() {
    let dims = ArchitectureDims::tiny();
    let pt: Attached64 = attached(dims.clone(), PeftConfig::prompt_tuning(3), 4);
    let mut spt: Attached64 = attached(dims.clone(), PeftConfig::scaled_prompt_tuning(3), 4);
    assert_eq!(pt.method_params().get("peft.soft_prompt").unwrap(), spt.method_params().get("peft.soft_prompt").unwrap());
    let mut r = rng(2);
    for _ in 0..20 {
        let batch = random_batch(&mut r, dims.vocab_size, 1);
        assert!(pt.forward_logits(&batch).unwrap().bit_eq(&spt.forward_logits(&batch).unwrap()));
    }
    spt.method_params_mut().get_mut("peft.scaling_vector").unwrap().data_mut()[0] = 0.5;
    let batch = random_batch(&mut r, dims.vocab_size, 1);
    assert!(!pt.forward_logits(&batch).unwrap().bit_eq(&spt.forward_logits(&batch).unwrap()));
}

#[test]
fn neutral_initializations_leave_backbone_outputs_unchanged() {
    let dims = ArchitectureDims::tiny();
    for config in [PeftConfig::lora(2), PeftConfig::adapter(2), PeftConfig::compacter(2, 2), PeftConfig::IA3] {
        let m: Attached32 = attached(dims.clone(), config.clone(), 8);
        let mut r = rng(3);
        for _ in 0..20 {
            let batch = random_batch(&mut r, dims.vocab_size, 1);
            let with = m.forward_logits(&batch).unwrap();
            let without = m.backbone().forward_logits(&batch, PeftHooks::none()).unwrap();
            assert!(with.max_abs_diff(&without).unwrap() <= 1e-6, "{}", config.label());
        }
    }
}

#[test]
fn prefix_is_not_neutral() {
    let dims = ArchitectureDims::tiny();
    let m: Attached32 = attached(dims.clone(), PeftConfig::prefix_tuning(2), 8);
    let batch = random_batch(&mut rng(3), dims.vocab_size, 1);
    let without = m.backbone().forward_logits(&batch, PeftHooks::none()).unwrap();
    assert!(m.forward_logits(&batch).unwrap().max_abs_diff(&without).unwrap() > 1e-4);
}

#[test]
fn frozen_backbone_survives_training_and_checkpoints() {
    let dims = ArchitectureDims::tiny();
    for config in tiny_roster().into_iter().filter(|c| *c != PeftConfig::FineTune) {
        let mut m: Attached32 = attached(dims.clone(), config.clone(), 21);
        let before = m.backbone().params().clone();
        let method_before = m.method_params().clone();
        train_steps(&mut m, 30, 5);
        assert_eq!(m.backbone().params(), &before, "{}", config.label());
        assert_ne!(m.method_params(), &method_before, "{} did not train", config.label());

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, "v", 30, 0.0, dir.path()).unwrap();
        let (mut back, _) = load_checkpoint(dir.path(), Some(m.backbone().clone())).unwrap();
        let batch = random_batch(&mut rng(6), dims.vocab_size, 2);
        assert!(back.forward_logits(&batch).unwrap().bit_eq(&m.forward_logits(&batch).unwrap()));
        train_steps(&mut back, 10, 7);
        for (name, t) in back.backbone().params().iter() {
            assert!(t.bit_eq(before.get(name).unwrap()), "{name} moved after reload");
        }
    }
}

#[test]
fn fine_tuning_moves_the_backbone() {
    let mut m: Attached32 = attached(ArchitectureDims::tiny(), PeftConfig::FineTune, 2);
    let before = m.backbone().params().clone();
    train_steps(&mut m, 3, 1);
    assert_ne!(m.backbone().params(), &before);
}
