//! Whole-model finite-difference check on a tiny random batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{CtrModel, Variant};
use super::train::RunConfig;
use crate::data::{Sample, Vocab};
use crate::error::{LmnError, Result};
use crate::numerics::{finite_diff_check, GradCheckReport, ParamId};
use crate::optim::Adagrad;

const VOCAB: Vocab = Vocab {
    users: 5,
    items: 9,
    cross: 3,
};
const SEQ_LEN: usize = 3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub batch_size: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            batch_size: 4,
            epsilon: crate::numerics::gradcheck::DEFAULT_EPSILON,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Small enough that every coordinate can be perturbed: n=16, d=4, K=2.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig {
        variant: Variant::Lmn,
        embed_dim: 4,
        tower: vec![6],
        ..RunConfig::default()
    };
    cfg.memory.sqrt_n = 4;
    cfg.memory.k_top = 2;
    cfg
}

/// Replaces every bias with a draw from `±scale`.
///
/// Biases start at zero, which can leave a whole hidden layer dead for some
/// position; its query is then constant, every memory score ties, and top-k
/// sits exactly on a discontinuity where finite differences mean nothing.
pub fn jitter_biases(model: &mut CtrModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = (0..model.params().len())
        .map(ParamId)
        .filter(|&id| model.params().name(id).ends_with("bias"))
        .collect();
    for id in ids {
        let b = model.params_mut().get_mut(id);
        b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// Random samples over the tiny vocabulary, including fully padded sequences.
pub fn random_batch(len: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let mask_len = rng.gen_range(0..=SEQ_LEN);
            let mut seq: Vec<usize> = (0..mask_len).map(|_| rng.gen_range(1..VOCAB.items)).collect();
            seq.resize(SEQ_LEN, 0);
            Sample {
                user_id: rng.gen_range(1..VOCAB.users),
                item_id: rng.gen_range(1..VOCAB.items),
                cross_id: rng.gen_range(1..VOCAB.cross),
                seq,
                mask_len,
                label: rng.gen_range(0..=1),
                day: 1,
            }
        })
        .collect()
}

/// Builds the model described by `cfg` over a tiny vocabulary and compares
/// its backward pass against central differences of the total loss.
pub fn check_model_gradients(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    if opts.batch_size == 0 {
        return Err(LmnError::contract("batch_size must be positive"));
    }
    let mut model = CtrModel::new(cfg.model_config(VOCAB), Adagrad::new(cfg.train.lr), 1)?;
    jitter_biases(&mut model, opts.seed, 0.3);
    let batch = random_batch(opts.batch_size, opts.seed);
    let (_, grads) = model.gradients(&batch)?;
    let analytic = model.flat_gradients(&grads);
    finite_diff_check(
        &mut model,
        |m| Ok(m.forward(&batch)?.total_loss),
        &analytic,
        opts.epsilon,
        opts.tolerance,
    )
}
