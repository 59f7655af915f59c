//! Built-in environments with analytically known dynamics and experts.
//!
//! Training never calls [`Environment::step`]; it exists for demonstration
//! generation and evaluation rollouts.

use alloc::vec::Vec;

use crate::data::{Action, Dataset, EnvDescriptor, Trajectory};
use crate::error::Result;
use crate::rng::{self, Rng};

pub mod gridworld;
pub mod pointmass;

pub use gridworld::{GridExpert, GridWorld};
pub use pointmass::{PointMass, PointMassExpert};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    pub reward: f64,
    /// The next state is terminal (absorbing).
    pub done: bool,
}

/// `log T(s' | s, a)`, flagged when it is only an approximation
/// (e.g. a clipped PointMass coordinate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionDensity {
    pub log_density: f64,
    pub exact: bool,
}

pub trait Environment {
    fn descriptor(&self) -> EnvDescriptor;

    fn reset(&self, rng: &mut Rng) -> Vec<f64>;

    fn step(&self, state: &[f64], action: &Action, rng: &mut Rng) -> Result<Step>;

    fn transition_logpdf(&self, state: &[f64], action: &Action, next: &[f64]) -> Result<TransitionDensity>;
}

/// Demonstrator with a closed-form action distribution.
pub trait Expert {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Result<Action>;

    fn logpdf(&self, state: &[f64], action: &Action) -> Result<f64>;
}

pub fn env_reset(env: &impl Environment, seed: u64) -> Vec<f64> {
    env.reset(&mut rng::seeded(seed, 0))
}

pub fn env_step(env: &impl Environment, state: &[f64], action: &Action, seed: u64) -> Result<Step> {
    env.step(state, action, &mut rng::seeded(seed, 0))
}

/// `n` expert trajectories of at most `horizon` steps; each stops early
/// when the environment reports an absorbing state.
pub fn generate_demonstrations(
    env: &impl Environment,
    expert: &impl Expert,
    n_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = rng::seeded(seed, rng::stream::DEMOS);
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        let mut tr = Trajectory::default();
        let mut s = env.reset(&mut rng);
        for _ in 0..horizon {
            let a = expert.act(&s, &mut rng)?;
            let step = env.step(&s, &a, &mut rng)?;
            tr.push(s, a);
            s = step.next;
            if step.done {
                break;
            }
        }
        trajectories.push(tr);
    }
    let mut env_desc = env.descriptor();
    env_desc.horizon = horizon;
    Ok(Dataset {
        env: env_desc,
        trajectories,
    })
}

/// One of the built-in environments, chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinEnv {
    GridWorld(GridWorld),
    PointMass(PointMass),
}

impl BuiltinEnv {
    pub fn expert(&self) -> BuiltinExpert {
        match self {
            BuiltinEnv::GridWorld(g) => BuiltinExpert::Grid(GridExpert::optimal(g, gridworld::DEFAULT_EPSILON)),
            BuiltinEnv::PointMass(p) => BuiltinExpert::Point(PointMassExpert::new(p.clone())),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            BuiltinEnv::GridWorld(g) => g.horizon,
            BuiltinEnv::PointMass(p) => p.horizon,
        }
    }
}

impl Environment for BuiltinEnv {
    fn descriptor(&self) -> EnvDescriptor {
        match self {
            BuiltinEnv::GridWorld(e) => e.descriptor(),
            BuiltinEnv::PointMass(e) => e.descriptor(),
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            BuiltinEnv::GridWorld(e) => e.reset(rng),
            BuiltinEnv::PointMass(e) => e.reset(rng),
        }
    }

    fn step(&self, state: &[f64], action: &Action, rng: &mut Rng) -> Result<Step> {
        match self {
            BuiltinEnv::GridWorld(e) => e.step(state, action, rng),
            BuiltinEnv::PointMass(e) => e.step(state, action, rng),
        }
    }

    fn transition_logpdf(&self, state: &[f64], action: &Action, next: &[f64]) -> Result<TransitionDensity> {
        match self {
            BuiltinEnv::GridWorld(e) => e.transition_logpdf(state, action, next),
            BuiltinEnv::PointMass(e) => e.transition_logpdf(state, action, next),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinExpert {
    Grid(GridExpert),
    Point(PointMassExpert),
}

impl Expert for BuiltinExpert {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Result<Action> {
        match self {
            BuiltinExpert::Grid(e) => e.act(state, rng),
            BuiltinExpert::Point(e) => e.act(state, rng),
        }
    }

    fn logpdf(&self, state: &[f64], action: &Action) -> Result<f64> {
        match self {
            BuiltinExpert::Grid(e) => e.logpdf(state, action),
            BuiltinExpert::Point(e) => e.logpdf(state, action),
        }
    }
}
