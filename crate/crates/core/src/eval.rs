//! Policy rollouts.
//!
//! All episodes advance in lockstep so the policy sees one batched forward
//! pass per time step. Each episode owns its environment RNG stream, so
//! returns do not depend on how many episodes run alongside it.

use alloc::vec::Vec;

use crate::data::{Action, ActionSpace};
use crate::envs::{Environment, Expert};
use crate::error::Result;
use crate::math;
use crate::policy::Policy;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// First RNG stream used for per-episode environment noise.
const EPISODE_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Act with the policy mode instead of sampling.
    pub deterministic: bool,
}

impl EvalConfig {
    pub fn new(episodes: usize, horizon: usize, seed: u64) -> Self {
        Self {
            episodes,
            horizon,
            seed,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Rolls out `act` on `config.episodes` episodes. `act` maps a `[B, d]`
/// batch of states to `B` actions; out-of-range actions are clipped to
/// `space` before stepping.
pub fn rollout(
    env: &impl Environment,
    config: &EvalConfig,
    mut act: impl FnMut(&Tensor, &mut Rng) -> Result<Vec<Action>>,
) -> Result<EvalStats> {
    let desc = env.descriptor();
    let space = desc.action_space;
    let n = config.episodes;
    let mut rngs: Vec<Rng> = (0..n as u64)
        .map(|e| rng::seeded(config.seed, EPISODE_STREAM_BASE + e))
        .collect();
    let mut act_rng = rng::seeded(config.seed, rng::stream::EVAL);
    let mut states: Vec<Vec<f64>> = rngs.iter_mut().map(|r| env.reset(r)).collect();
    let mut returns = alloc::vec![0.0; n];
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..config.horizon {
        if active.is_empty() {
            break;
        }
        let mut flat = Vec::with_capacity(active.len() * desc.state_dim);
        for &e in &active {
            flat.extend_from_slice(&states[e]);
        }
        let batch = Tensor::matrix(active.len(), desc.state_dim, flat)?;
        let actions = act(&batch, &mut act_rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (&e, a) in active.iter().zip(actions) {
            let step = env.step(&states[e], &space.clip(a), &mut rngs[e])?;
            returns[e] += step.reward;
            states[e] = step.next;
            if !step.done {
                still.push(e);
            }
        }
        active = still;
    }
    let (mean, std) = math::mean_std(&returns);
    Ok(EvalStats { returns, mean, std })
}

pub fn evaluate_policy(env: &impl Environment, policy: &Policy, config: &EvalConfig) -> Result<EvalStats> {
    rollout(env, config, |s, rng| policy.act_batch(s, config.deterministic, rng))
}

pub fn evaluate_expert(env: &impl Environment, expert: &impl Expert, config: &EvalConfig) -> Result<EvalStats> {
    rollout(env, config, |s, rng| (0..s.rows()).map(|r| expert.act(s.row(r), rng)).collect())
}

/// Uniformly random actions over the action space.
pub fn evaluate_random(env: &impl Environment, config: &EvalConfig) -> Result<EvalStats> {
    let space = env.descriptor().action_space;
    rollout(env, config, |s, rng| {
        Ok((0..s.rows())
            .map(|_| match space {
                ActionSpace::Discrete { n } => Action::Discrete(rng::index(rng, n)),
                ActionSpace::Continuous { dim, low, high } => {
                    Action::Continuous((0..dim).map(|_| rng::uniform(rng, low, high)).collect())
                }
            })
            .collect())
    })
}

/// `(R - R_random) / (R_expert - R_random)`: 0 for random play, 1 for the expert.
pub fn normalized_score(ret: f64, random: f64, expert: f64) -> f64 {
    (ret - random) / (expert - random)
}
