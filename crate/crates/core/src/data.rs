//! Demonstration datasets, tuple buffers and seeded batch sampling.
//!
//! A dataset holds only `(s, a)` sequences: there is no reward anywhere in
//! these types.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of the real-valued action encoding (one-hot for discrete).
    pub fn feature_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        match (*self, a) {
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => *i < n,
            (ActionSpace::Continuous { dim, .. }, Action::Continuous(v)) => {
                v.len() == dim && v.iter().all(|x| x.is_finite())
            }
            _ => false,
        }
    }

    /// Clips a continuous action into the box; discrete actions pass through.
    pub fn clip(&self, a: Action) -> Action {
        match (*self, a) {
            (ActionSpace::Continuous { low, high, .. }, Action::Continuous(v)) => {
                Action::Continuous(v.into_iter().map(|x| x.clamp(low, high)).collect())
            }
            (_, a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Column-stacked batch of actions.
#[derive(Debug, Clone, PartialEq)]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Tensor),
}

impl Actions {
    pub fn from_slice(actions: &[Action]) -> Result<Self> {
        match actions.first() {
            None => Err(Error::EmptyDataset),
            Some(Action::Discrete(_)) => actions
                .iter()
                .map(|a| match a {
                    Action::Discrete(i) => Ok(*i),
                    Action::Continuous(_) => Err(Error::Unsupported("mixed action kinds".into())),
                })
                .collect::<Result<Vec<_>>>()
                .map(Actions::Discrete),
            Some(Action::Continuous(first)) => {
                let dim = first.len();
                let mut data = Vec::with_capacity(actions.len() * dim);
                for a in actions {
                    match a {
                        Action::Continuous(v) if v.len() == dim => data.extend_from_slice(v),
                        _ => return Err(Error::Unsupported("mixed action kinds or widths".into())),
                    }
                }
                Ok(Actions::Continuous(Tensor::matrix(actions.len(), dim, data)?))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete(v) => v.len(),
            Actions::Continuous(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Actions {
        match self {
            Actions::Discrete(v) => Actions::Discrete(idx.iter().map(|&i| v[i]).collect()),
            Actions::Continuous(t) => Actions::Continuous(t.select_rows(idx)),
        }
    }

    /// Real-valued encoding `[B, feature_dim]`: one-hot rows for discrete actions.
    pub fn features(&self, space: &ActionSpace) -> Result<Tensor> {
        match (self, *space) {
            (Actions::Discrete(v), ActionSpace::Discrete { n }) => {
                let mut data = vec![0.0; v.len() * n];
                for (r, &i) in v.iter().enumerate() {
                    if i >= n {
                        return Err(Error::ActionIndex { index: i, n });
                    }
                    data[r * n + i] = 1.0;
                }
                Tensor::matrix(v.len(), n, data)
            }
            (Actions::Continuous(t), ActionSpace::Continuous { dim, .. }) if t.cols() == dim => Ok(t.clone()),
            _ => Err(Error::Unsupported("action encoding does not match the action space".into())),
        }
    }
}

/// What a dataset was generated from; stored in every dataset header.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvDescriptor {
    pub name: String,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: Vec<f64>, a: Action) {
        self.states.push(s);
        self.actions.push(a);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvDescriptor,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn n_pairs(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Checks every trajectory against the descriptor.
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (k, tr) in self.trajectories.iter().enumerate() {
            if tr.is_empty() || tr.states.len() != tr.actions.len() {
                return Err(Error::InvalidState(alloc::format!("trajectory {k} is empty or ragged")));
            }
            for (s, a) in tr.states.iter().zip(&tr.actions) {
                if s.len() != self.env.state_dim || s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidState(alloc::format!(
                        "trajectory {k}: state {s:?} does not match state_dim {}",
                        self.env.state_dim
                    )));
                }
                if !self.env.action_space.contains(a) {
                    return Err(Error::InvalidState(alloc::format!(
                        "trajectory {k}: action {a:?} outside {:?}",
                        self.env.action_space
                    )));
                }
            }
        }
        Ok(())
    }

    /// `n` trajectories drawn uniformly without replacement. The picks are
    /// the first `n` entries of one seeded permutation of the pool, so for a
    /// fixed seed a smaller subsample is contained in every larger one.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let picked = Self::subsample_indices(self.trajectories.len(), n, seed)?;
        Ok(Dataset {
            env: self.env.clone(),
            trajectories: picked.iter().map(|&i| self.trajectories[i].clone()).collect(),
        })
    }

    /// Indices that [`Dataset::subsample`] would pick.
    pub fn subsample_indices(pool: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
        if n > pool {
            return Err(Error::PoolTooSmall { requested: n, pool });
        }
        let mut rng = rng::seeded(seed, rng::stream::SUBSAMPLE);
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..n {
            let j = i + rng::index(&mut rng, pool - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        Ok(idx)
    }
}

/// Every `(s, a)` pair of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBuffer {
    pub states: Tensor,
    pub actions: Actions,
}

impl PairBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PairBuffer {
        PairBuffer {
            states: self.states.select_rows(idx),
            actions: self.actions.select(idx),
        }
    }
}

/// Consecutive `(s, a, s', a')` tuples within trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleBuffer {
    pub states: Tensor,
    pub actions: Actions,
    pub next_states: Tensor,
    pub next_actions: Actions,
}

impl TupleBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TupleBuffer {
        TupleBuffer {
            states: self.states.select_rows(idx),
            actions: self.actions.select(idx),
            next_states: self.next_states.select_rows(idx),
            next_actions: self.next_actions.select(idx),
        }
    }
}

/// Uniform sampling with replacement from `0..n`, one seeded stream.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    rng: Rng,
    n: usize,
}

impl IndexSampler {
    pub fn new(n: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            rng: rng::seeded(seed, stream),
            n,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| rng::index(&mut self.rng, self.n)).collect()
    }
}

/// One training batch: tuples for the balance term and pairs for the policy term.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tuple_idx: Vec<usize>,
    pub pair_idx: Vec<usize>,
    pub tuples: TupleBuffer,
    pub pairs: PairBuffer,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.tuple_idx.len()
    }
}

/// Endless stream of batches drawn with replacement; tuple and pair indices
/// come from independent seeded streams.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    tuples: &'a TupleBuffer,
    pairs: &'a PairBuffer,
    tuple_sampler: Option<IndexSampler>,
    pair_sampler: IndexSampler,
    batch_size: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(tuples: &'a TupleBuffer, pairs: &'a PairBuffer, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let tuple_sampler = if tuples.is_empty() {
            None
        } else {
            Some(IndexSampler::new(tuples.len(), seed, rng::stream::TUPLE_BATCH)?)
        };
        Ok(Self {
            tuples,
            pairs,
            tuple_sampler,
            pair_sampler: IndexSampler::new(pairs.len(), seed, rng::stream::BC_BATCH)?,
            batch_size,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let pair_idx = self.pair_sampler.next_batch(self.batch_size);
        let tuple_idx = match &mut self.tuple_sampler {
            Some(s) => s.next_batch(self.batch_size),
            None => Vec::new(),
        };
        Some(Batch {
            tuples: self.tuples.select(&tuple_idx),
            pairs: self.pairs.select(&pair_idx),
            tuple_idx,
            pair_idx,
        })
    }
}
