//! Standalone behavior cloning.
//!
//! Shares initialization, the pair-sampling stream and the update loop with
//! [`crate::mbil::train_policy`], so MBIL at `α = 0, β = 1` reproduces it
//! exactly.

use crate::data::{ActionSpace, Dataset, IndexSampler, PairBuffer};
use crate::error::Result;
use crate::mbil::{self, Evaluator, PolicyTrainConfig, TrainReport};
use crate::policy::Policy;
use crate::rng;

pub fn train_bc_pairs(
    pairs: &PairBuffer,
    space: &ActionSpace,
    config: &PolicyTrainConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<(Policy, TrainReport)> {
    config.validate()?;
    let policy = Policy::for_space(pairs.states.cols(), space, config.hidden, config.seed);
    let mut sampler = IndexSampler::new(pairs.len(), config.seed, rng::stream::BC_BATCH)?;
    mbil::run_policy_loop(policy, config, evaluator, |tape, policy, params, _| {
        let idx = sampler.next_batch(config.batch_size);
        let batch = pairs.select(&idx);
        let s = tape.constant(batch.states.clone());
        let loss = policy.bc_loss_tape(tape, params, s, &batch.actions, config.loss)?;
        Ok((loss, None, loss, idx))
    })
}

pub fn train_bc(
    dataset: &Dataset,
    config: &PolicyTrainConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<(Policy, TrainReport)> {
    dataset.validate()?;
    let buffers = mbil::build_tuples(dataset)?;
    train_bc_pairs(&buffers.pairs, &dataset.env.action_space, config, evaluator)
}
