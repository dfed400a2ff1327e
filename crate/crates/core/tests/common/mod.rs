#![allow(dead_code)]

use peft_forge::model::{ArchitectureDims, Seq2SeqModel, TokenBatch};
use peft_forge::peft::{AttachedModel, PeftConfig, PrefixPlacement, ScaleShape};
use peft_forge::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every method with small hyperparameters that divide the tiny dims.
pub fn tiny_roster() -> Vec<PeftConfig> {
    vec![
        PeftConfig::FineTune,
        PeftConfig::prompt_tuning(3),
        PeftConfig::scaled_prompt_tuning(3),
        PeftConfig::ScaledPromptTuning { k: 3, scale_shape: ScaleShape::Scalar },
        PeftConfig::ScaledPromptTuning { k: 3, scale_shape: ScaleShape::Matrix },
        PeftConfig::prefix_tuning(2),
        PeftConfig::PrefixTuning { len: 2, placement: PrefixPlacement::EncoderOnly },
        PeftConfig::lora(2),
        PeftConfig::adapter(2),
        PeftConfig::compacter(2, 2),
        PeftConfig::IA3,
        PeftConfig::unipelt(2, 2, 2),
    ]
}

/// Every method at the sizes used on the toy preset.
pub fn toy_roster() -> Vec<PeftConfig> {
    vec![
        PeftConfig::FineTune,
        PeftConfig::prompt_tuning(50),
        PeftConfig::scaled_prompt_tuning(50),
        PeftConfig::ScaledPromptTuning { k: 10, scale_shape: ScaleShape::Scalar },
        PeftConfig::ScaledPromptTuning { k: 10, scale_shape: ScaleShape::Matrix },
        PeftConfig::prefix_tuning(5),
        PeftConfig::prefix_tuning(10),
        PeftConfig::PrefixTuning { len: 5, placement: PrefixPlacement::EncoderOnly },
        PeftConfig::PrefixTuning { len: 5, placement: PrefixPlacement::EncAndDecSelf },
        PeftConfig::lora(8),
        PeftConfig::adapter(16),
        PeftConfig::compacter(4, 16),
        PeftConfig::IA3,
        PeftConfig::unipelt(16, 8, 5),
    ]
}

/// Random source/target pairs over non-special ids.
pub fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> TokenBatch {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .map(|_| {
            let el = rng.random_range(2..7);
            let dl = rng.random_range(1..5);
            ((0..el).map(|_| rng.random_range(4..vocab)).collect(), (0..dl).map(|_| rng.random_range(4..vocab)).collect())
        })
        .collect();
    TokenBatch::from_pairs(&pairs)
}

pub fn attached<T: Scalar>(dims: ArchitectureDims, config: PeftConfig, seed: u64) -> AttachedModel<T> {
    let bb = Seq2SeqModel::new(dims, seed).unwrap();
    AttachedModel::attach(bb, config, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
